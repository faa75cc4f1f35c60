//! Decoder-only transformer over `prefix + grid` sequences.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Coord, MaskSpec};
use crate::nn::{AttentionSpec, Graph, Scalar, Tensor, Var};
use crate::rng;

use super::config::ModelConfig;
use super::weights::{BackboneWeights, EmbedWeights, HeadWeights, LayerWeights};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar> {
    pub config: ModelConfig,
    pub weights: BackboneWeights<Tensor<T>>,
}

/// Where a sequence position sits: in the condition prefix or on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Prefix(usize),
    Grid(Coord),
}

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut rng::Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

pub(crate) fn init_layer<T: Scalar>(rng: &mut rng::Rng, cfg: &ModelConfig) -> LayerWeights<Tensor<T>> {
    let d = cfg.d_model;
    let out_std = INIT_STD / (2.0 * cfg.num_layers as f64).sqrt();
    LayerWeights {
        attn_norm: Tensor::full(&[d], T::one()),
        wq: normal_tensor(rng, &[d, d], INIT_STD),
        wk: normal_tensor(rng, &[d, d], INIT_STD),
        wv: normal_tensor(rng, &[d, d], INIT_STD),
        wo: normal_tensor(rng, &[d, d], out_std),
        ffn_norm: Tensor::full(&[d], T::one()),
        w1: normal_tensor(rng, &[d, cfg.ffn_dim], INIT_STD),
        w2: normal_tensor(rng, &[cfg.ffn_dim, d], out_std),
    }
}

impl<T: Scalar> Backbone<T> {
    /// Random initialization from the config's `"init"` stream.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "init");
        let d = config.d_model;
        let embed = EmbedWeights {
            tokens: normal_tensor(&mut r, &[config.embed_rows(), d], INIT_STD),
            prefix_pos: normal_tensor(&mut r, &[config.prefix_len, d], INIT_STD),
            rows: normal_tensor(&mut r, &[config.height, d], INIT_STD),
            cols: normal_tensor(&mut r, &[config.width, d], INIT_STD),
        };
        let layers = (0..config.num_layers).map(|_| init_layer(&mut r, &config)).collect();
        let head = HeadWeights {
            norm: Tensor::full(&[d], T::one()),
            proj: normal_tensor(&mut r, &[d, config.vocab_size], INIT_STD),
        };
        Ok(Self {
            config,
            weights: BackboneWeights { embed, layers, head },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            weights: self
                .weights
                .try_map(&mut |_, t| Ok(t.cast()))
                .expect("cast is infallible"),
        }
    }

    /// Places every parameter on `g`; `trainable(name)` decides which ones
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Result<BackboneWeights<Var>> {
        self.weights.try_map(&mut |name, t| Ok(g.leaf(t.clone(), trainable(name))))
    }

    /// Additive position vector: learned row + column embedding for grid
    /// positions, a separate learned table for prefix positions.
    pub fn positional_encoding(&self, at: Position) -> Result<Vec<T>> {
        let e = &self.weights.embed;
        match at {
            Position::Prefix(i) if i < self.config.prefix_len => Ok(e.prefix_pos.row(i).to_vec()),
            Position::Grid(c) if c.row < self.config.height && c.col < self.config.width => Ok(e
                .rows
                .row(c.row)
                .iter()
                .zip(e.cols.row(c.col))
                .map(|(&a, &b)| a + b)
                .collect()),
            other => Err(Error::IndexOutOfRange(format!("{other:?}"))),
        }
    }

    /// Teacher-forced evaluation of `batch` sequences without gradients.
    pub fn forward_full(&self, ids: &[usize], batch: usize, mask: &MaskSpec) -> Result<FullForward<T>> {
        let mut g = Graph::new();
        let w = self.bind(&mut g, &|_| false)?;
        let out = backbone_graph(&mut g, &self.config, &w, ids, batch, mask)?;
        Ok(FullForward {
            hidden: out.layers.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(out.logits).clone(),
        })
    }
}

/// Per-layer outputs (`[batch * seq_len, d]`, index `l` = output of layer
/// `l`) and head logits for every position.
#[derive(Clone, Debug)]
pub struct FullForward<T> {
    pub hidden: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneGraph {
    pub embedded: Var,
    pub layers: Vec<Var>,
    pub logits: Var,
}

pub(crate) fn check_sequences(cfg: &ModelConfig, ids: &[usize], batch: usize, mask: &MaskSpec) -> Result<()> {
    let s = cfg.seq_len();
    if ids.len() != batch * s || batch == 0 {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!("{} ids for {batch} sequences of {s}", ids.len()),
        });
    }
    if (mask.prefix_len, mask.height, mask.width) != (cfg.prefix_len, cfg.height, cfg.width) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!("mask {mask:?} does not match model dims"),
        });
    }
    Ok(())
}

pub(crate) fn attention_spec(cfg: &ModelConfig, mask: &MaskSpec) -> AttentionSpec {
    let mask: Arc<[bool]> = mask.full().into();
    AttentionSpec {
        heads: cfg.num_heads,
        seq_len: cfg.seq_len(),
        mask,
    }
}

/// Row indices into the stacked `[prefix_pos; rows; cols; zero]` table for
/// the two additive positional terms of every sequence position.
fn position_rows(cfg: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let (p, h, w) = (cfg.prefix_len, cfg.height, cfg.width);
    let zero = p + h + w;
    let mut a = Vec::with_capacity(cfg.seq_len());
    let mut b = Vec::with_capacity(cfg.seq_len());
    for i in 0..p {
        a.push(i);
        b.push(zero);
    }
    for r in 0..h {
        for c in 0..w {
            a.push(p + r);
            b.push(p + h + c);
        }
    }
    (a, b)
}

pub(crate) fn embed_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    w: &EmbedWeights<Var>,
    ids: &[usize],
    batch: usize,
) -> Result<Var> {
    let tok = g.embedding(w.tokens, ids)?;
    let zero = g.constant(Tensor::zeros(&[1, cfg.d_model]));
    let table = g.concat_rows(&[w.prefix_pos, w.rows, w.cols, zero])?;
    let (a, b) = position_rows(cfg);
    let a: Vec<usize> = a.iter().copied().cycle().take(batch * a.len()).collect();
    let b: Vec<usize> = b.iter().copied().cycle().take(batch * b.len()).collect();
    let pa = g.embedding(table, &a)?;
    let pb = g.embedding(table, &b)?;
    let x = g.add(tok, pa)?;
    g.add(x, pb)
}

pub(crate) fn layer_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: &LayerWeights<Var>,
    x: Var,
    spec: &AttentionSpec,
) -> Result<Var> {
    let h = g.rms_norm(x, w.attn_norm)?;
    let q = g.matmul(h, w.wq)?;
    let k = g.matmul(h, w.wk)?;
    let v = g.matmul(h, w.wv)?;
    let a = g.attention(q, k, v, spec.clone())?;
    let o = g.matmul(a, w.wo)?;
    let x = g.add(x, o)?;
    let h = g.rms_norm(x, w.ffn_norm)?;
    let f = g.matmul(h, w.w1)?;
    let f = g.silu(f)?;
    let f = g.matmul(f, w.w2)?;
    g.add(x, f)
}

pub(crate) fn layers_graph<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerWeights<Var>],
    mut x: Var,
    spec: &AttentionSpec,
    outputs: &mut Vec<Var>,
) -> Result<Var> {
    for l in layers {
        x = layer_graph(g, l, x, spec)?;
        outputs.push(x);
    }
    Ok(x)
}

pub(crate) fn head_graph<T: Scalar>(g: &mut Graph<T>, w: &HeadWeights<Var>, x: Var) -> Result<Var> {
    let h = g.rms_norm(x, w.norm)?;
    g.matmul(h, w.proj)
}

/// Full raster-backbone forward on the tape.
pub fn backbone_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    w: &BackboneWeights<Var>,
    ids: &[usize],
    batch: usize,
    mask: &MaskSpec,
) -> Result<BackboneGraph> {
    check_sequences(cfg, ids, batch, mask)?;
    let spec = attention_spec(cfg, mask);
    let embedded = embed_graph(g, cfg, &w.embed, ids, batch)?;
    let mut layers = Vec::with_capacity(w.layers.len());
    let x = layers_graph(g, &w.layers, embedded, &spec, &mut layers)?;
    let logits = head_graph(g, &w.head, x)?;
    Ok(BackboneGraph {
        embedded,
        layers,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MaskKind;
    use crate::model::Condition;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            num_heads: 2,
            head_dim: 8,
            ffn_dim: 24,
            vocab_size: 8,
            num_classes: 2,
            height: 4,
            width: 4,
            prefix_len: 1,
            seed: 5,
        }
    }

    fn ids(cfg: &ModelConfig, tokens: &[u32]) -> Vec<usize> {
        let grid = crate::grid::TokenGrid::new(cfg.height, cfg.width, cfg.vocab_size, tokens.to_vec()).unwrap();
        cfg.sequence(&grid, Condition::Class(1)).unwrap()
    }

    #[test]
    fn raster_causality() {
        let cfg = tiny();
        let m = Backbone::<f64>::init(cfg.clone()).unwrap();
        let mask = cfg.mask(MaskKind::RasterCausal);
        let base: Vec<u32> = (0..16).map(|i| (i * 3 % 8) as u32).collect();
        let a = m.forward_full(&ids(&cfg, &base), 1, &mask).unwrap();
        let mut changed = base.clone();
        changed[10] = (changed[10] + 1) % 8;
        let b = m.forward_full(&ids(&cfg, &changed), 1, &mask).unwrap();
        let v = cfg.vocab_size;
        for pos in 0..cfg.seq_len() {
            let same = a.logits.row(pos) == b.logits.row(pos);
            assert_eq!(same, pos < 1 + 10, "position {pos}");
        }
        assert_eq!(a.logits.numel(), cfg.seq_len() * v);
    }

    #[test]
    fn masked_keys_never_influence_queries() {
        let cfg = tiny();
        let m = Backbone::<f64>::init(cfg.clone()).unwrap();
        let mask = cfg.mask(MaskKind::DiagonalCausal);
        let base: Vec<u32> = (0..16).map(|i| (i * 5 % 8) as u32).collect();
        let a = m.forward_full(&ids(&cfg, &base), 1, &mask).unwrap();
        for k in 0..16 {
            let mut changed = base.clone();
            changed[k] = (changed[k] + 3) % 8;
            let b = m.forward_full(&ids(&cfg, &changed), 1, &mask).unwrap();
            for q in 0..16 {
                let visible = mask.allows(1 + q, 1 + k).unwrap();
                if !visible {
                    assert_eq!(a.logits.row(1 + q), b.logits.row(1 + q), "q {q} k {k}");
                }
            }
        }
    }

    #[test]
    fn self_and_prefix_only_mask_isolates_positions() {
        // Under the diagonal mask (0, 0) sees only the prefix and itself.
        let cfg = tiny();
        let m = Backbone::<f64>::init(cfg.clone()).unwrap();
        let mask = cfg.mask(MaskKind::DiagonalCausal);
        let base: Vec<u32> = vec![1; 16];
        let a = m.forward_full(&ids(&cfg, &base), 1, &mask).unwrap();
        let mut changed = base.clone();
        for t in changed.iter_mut().skip(1) {
            *t = 6;
        }
        let b = m.forward_full(&ids(&cfg, &changed), 1, &mask).unwrap();
        assert_eq!(a.logits.row(1), b.logits.row(1));
        for l in 0..cfg.num_layers {
            assert_eq!(a.hidden[l].row(1), b.hidden[l].row(1));
        }
    }

    #[test]
    fn deterministic_forward() {
        let cfg = tiny();
        let m1 = Backbone::<f32>::init(cfg.clone()).unwrap();
        let m2 = Backbone::<f32>::init(cfg.clone()).unwrap();
        let x = ids(&cfg, &[3; 16]);
        let mask = cfg.mask(MaskKind::RasterCausal);
        assert_eq!(
            m1.forward_full(&x, 1, &mask).unwrap().logits,
            m2.forward_full(&x, 1, &mask).unwrap().logits
        );
    }

    #[test]
    fn positional_encodings_are_coordinate_functions() {
        let cfg = tiny();
        let m = Backbone::<f32>::init(cfg.clone()).unwrap();
        let mut seen = Vec::new();
        for p in 0..cfg.height {
            for q in 0..cfg.width {
                let e = m.positional_encoding(Position::Grid(Coord::new(p, q))).unwrap();
                assert!(!seen.contains(&e));
                seen.push(e);
            }
        }
        let e = m.positional_encoding(Position::Prefix(0)).unwrap();
        assert!(!seen.contains(&e));
        assert!(m.positional_encoding(Position::Grid(Coord::new(4, 0))).is_err());
        assert!(m.positional_encoding(Position::Prefix(1)).is_err());
    }

    #[test]
    fn length_mismatch() {
        let cfg = tiny();
        let m = Backbone::<f32>::init(cfg.clone()).unwrap();
        let mask = cfg.mask(MaskKind::RasterCausal);
        assert!(m.forward_full(&[0; 5], 1, &mask).is_err());
    }
}
