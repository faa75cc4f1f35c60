//! Teacher-forced NLL, pattern validity and grid rendering.

use serde::{Deserialize, Serialize};

use crate::data::{Sample, SyntheticGridSpec};
use crate::decode::argmax;
use crate::error::{Error, Result};
use crate::grid::{MaskKind, TokenGrid};
use crate::model::{Backbone, Condition, DualHeadModel, GateMode, ModelConfig};
use crate::nn::{kernels, Scalar};

/// Grids matching their rule at this fraction of positions count as valid.
pub const VALIDITY_THRESHOLD: f64 = 0.95;

/// Model under evaluation.
#[derive(Clone, Copy, Debug)]
pub enum EvalModel<'a, T: Scalar> {
    Raster(&'a Backbone<T>),
    Dual(&'a DualHeadModel<T>),
}

impl<T: Scalar> EvalModel<'_, T> {
    pub fn config(&self) -> &ModelConfig {
        match self {
            EvalModel::Raster(m) => &m.config,
            EvalModel::Dual(m) => &m.config,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: usize,
    pub tokens: usize,
    pub nll: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-token NLL in nats.
    pub nll: f64,
    pub accuracy: f64,
    pub tokens: usize,
    pub per_class: Vec<ClassEval>,
    pub validity: Option<ValidityReport>,
}

/// Per-target logits (`[batch * H * W, V]`) for a batch of samples.
fn target_logits<T: Scalar>(model: EvalModel<'_, T>, samples: &[&Sample], mask: MaskKind) -> Result<Vec<T>> {
    let cfg = model.config();
    let mut ids = Vec::with_capacity(samples.len() * cfg.seq_len());
    for s in samples {
        ids.extend(cfg.sequence(&s.grid, Condition::Class(s.class))?);
    }
    let spec = cfg.mask(mask);
    let (p0, hw, v) = (cfg.prefix_len, cfg.grid_len(), cfg.vocab_size);
    match model {
        EvalModel::Raster(m) => {
            let out = m.forward_full(&ids, samples.len(), &spec)?;
            let mut rows = Vec::with_capacity(samples.len() * hw * v);
            for b in 0..samples.len() {
                for i in 0..hw {
                    rows.extend_from_slice(out.logits.row(b * cfg.seq_len() + p0 - 1 + i));
                }
            }
            Ok(rows)
        }
        EvalModel::Dual(m) => {
            if mask != MaskKind::DiagonalCausal {
                return Err(Error::MaskKindMismatch {
                    expected: MaskKind::DiagonalCausal.name(),
                    actual: mask.name(),
                });
            }
            Ok(m.forward_full(&ids, samples.len(), &spec, GateMode::Learned)?.fused.into_data())
        }
    }
}

/// Teacher-forced mean NLL and greedy accuracy over `samples`, using
/// raster logits for a backbone and fused logits for a dual-head model.
pub fn eval_nll<T: Scalar>(model: EvalModel<'_, T>, samples: &[&Sample], mask: MaskKind, batch: usize) -> Result<EvalReport> {
    let cfg = model.config();
    if samples.is_empty() || batch == 0 {
        return Err(Error::InvalidConfig("evaluation needs samples and a positive batch".into()));
    }
    let v = cfg.vocab_size;
    let classes = cfg.num_classes;
    let mut per = vec![(0usize, 0.0f64, 0usize); classes];
    for chunk in samples.chunks(batch) {
        let logits = target_logits(model, chunk, mask)?;
        let mut rows = logits.chunks_exact(v);
        for s in chunk {
            for &t in s.grid.tokens() {
                let row = rows.next().expect("one row per target");
                let nll = (kernels::log_sum_exp(row) - row[t as usize]).to_f64();
                let e = &mut per[s.class];
                e.0 += 1;
                e.1 += nll;
                e.2 += usize::from(argmax(row) == t as usize);
            }
        }
    }
    let tokens: usize = per.iter().map(|e| e.0).sum();
    let nll: f64 = per.iter().map(|e| e.1).sum::<f64>() / tokens as f64;
    let correct: usize = per.iter().map(|e| e.2).sum();
    Ok(EvalReport {
        nll,
        accuracy: correct as f64 / tokens as f64,
        tokens,
        per_class: per
            .iter()
            .enumerate()
            .filter(|(_, e)| e.0 > 0)
            .map(|(class, e)| ClassEval {
                class,
                tokens: e.0,
                nll: e.1 / e.0 as f64,
                accuracy: e.2 as f64 / e.0 as f64,
            })
            .collect(),
        validity: None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Mean per-grid fraction of positions matching the class rule.
    pub mean_validity: f64,
    /// Fraction of grids at or above [`VALIDITY_THRESHOLD`].
    pub valid_fraction: f64,
    pub per_grid: Vec<f64>,
    /// `(class, mean validity, grids)`.
    pub per_class: Vec<(usize, f64, usize)>,
}

/// Scores each grid against the deterministic rule of its class.
pub fn pattern_validity(grids: &[TokenGrid], classes: &[usize], specs: &[SyntheticGridSpec]) -> Result<ValidityReport> {
    if grids.len() != classes.len() || grids.is_empty() {
        return Err(Error::InvalidConfig(format!("{} grids with {} class ids", grids.len(), classes.len())));
    }
    let mut per_grid = Vec::with_capacity(grids.len());
    let mut per_class: Vec<(f64, usize)> = vec![(0.0, 0); specs.len()];
    for (g, &c) in grids.iter().zip(classes) {
        let spec = specs.get(c).ok_or(Error::UnknownClass(c))?;
        if (g.height(), g.width()) != (spec.height, spec.width) {
            return Err(Error::ConfigMismatch(format!(
                "grid {}x{} vs pattern {}x{}",
                g.height(),
                g.width(),
                spec.height,
                spec.width
            )));
        }
        let w = g.width();
        let hits = g
            .tokens()
            .iter()
            .enumerate()
            .filter(|&(i, &t)| spec.token_at(i / w, i % w) == t)
            .count();
        let f = hits as f64 / g.tokens().len() as f64;
        per_grid.push(f);
        per_class[c].0 += f;
        per_class[c].1 += 1;
    }
    let n = per_grid.len() as f64;
    Ok(ValidityReport {
        mean_validity: per_grid.iter().sum::<f64>() / n,
        valid_fraction: per_grid.iter().filter(|&&f| f >= VALIDITY_THRESHOLD).count() as f64 / n,
        per_class: per_class
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 > 0)
            .map(|(c, e)| (c, e.0 / e.1 as f64, e.1))
            .collect(),
        per_grid,
    })
}

/// `n` distinct colors from an evenly spaced RGB cube, enough levels per
/// channel to cover `n`.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    let mut levels = 2usize;
    while levels.pow(3) < n {
        levels += 1;
    }
    let step = |i: usize| (i * 255 / (levels - 1)) as u8;
    let mut out = Vec::with_capacity(n);
    'outer: for r in 0..levels {
        for g in 0..levels {
            for b in 0..levels {
                if out.len() == n {
                    break 'outer;
                }
                out.push([step(r), step(g), step(b)]);
            }
        }
    }
    out
}

/// Binary P6 image with one `cell x cell` square per token.
pub fn render_grid(grid: &TokenGrid, palette: &[[u8; 3]], cell: usize) -> Result<Vec<u8>> {
    if palette.len() < grid.vocab() {
        return Err(Error::PaletteTooSmall {
            palette: palette.len(),
            needed: grid.vocab(),
        });
    }
    if cell == 0 {
        return Err(Error::InvalidConfig("cell size 0".into()));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut out = format!("P6\n{} {}\n255\n", w * cell, h * cell).into_bytes();
    for p in 0..h {
        for _ in 0..cell {
            for q in 0..w {
                let rgb = palette[grid.tokens()[p * w + q] as usize];
                for _ in 0..cell {
                    out.extend_from_slice(&rgb);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_specs;

    #[test]
    fn palette_distinct() {
        let p = default_palette(64);
        assert_eq!(p.len(), 64);
        let mut s = p.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 64);
        assert_eq!(default_palette(200).len(), 200);
    }

    #[test]
    fn two_by_two_render() {
        let g = TokenGrid::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let pal = [[10, 20, 30], [200, 100, 0]];
        let img = render_grid(&g, &pal, 1).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[10, 20, 30, 200, 100, 0, 200, 100, 0, 10, 20, 30]);
        assert_eq!(render_grid(&g, &pal, 1).unwrap(), img);
        let big = render_grid(&g, &pal, 3).unwrap();
        assert_eq!(big.len(), b"P6\n6 6\n255\n".len() + 36 * 3);
    }

    #[test]
    fn palette_too_small() {
        let g = TokenGrid::new(1, 1, 64, vec![0]).unwrap();
        assert!(matches!(render_grid(&g, &default_palette(63), 1), Err(Error::PaletteTooSmall { .. })));
        assert!(render_grid(&g, &default_palette(64), 1).is_ok());
    }

    #[test]
    fn clean_grids_fully_valid() {
        let specs = default_specs(8, 6, 5, 64, 0.0, 1).unwrap();
        let grids: Vec<_> = specs.iter().map(|s| s.clean_grid().unwrap()).collect();
        let r = pattern_validity(&grids, &(0..8).collect::<Vec<_>>(), &specs).unwrap();
        assert_eq!(r.mean_validity, 1.0);
        assert_eq!(r.valid_fraction, 1.0);
        assert!(pattern_validity(&grids[..1], &[9], &specs).is_err());
    }
}
