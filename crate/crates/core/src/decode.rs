//! Raster and diagonal-parallel decoding over KV caches, with sampling and
//! batched classifier-free guidance.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{diagonal_partition, Coord, MaskKind, Token, TokenGrid};
use crate::model::{fuse_logits, Backbone, Condition, DualHeadModel, KvCacheSet, ModelConfig};
use crate::nn::{Scalar, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// 0 disables top-k truncation.
    pub top_k: usize,
    pub seed: u64,
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self {
            scale: 2.0,
            enabled: true,
        }
    }
}

impl CfgConfig {
    pub fn disabled() -> Self {
        Self {
            scale: 1.0,
            enabled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    /// Sequential sampling steps.
    pub steps: usize,
    /// Forward passes through the model, prefix pass included.
    pub invocations: usize,
    /// Tokens sampled at each step.
    pub widths: Vec<usize>,
    pub step_times: Vec<Duration>,
    pub total_time: Duration,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Decoded<T> {
    pub grid: TokenGrid,
    pub trace: DecodeTrace,
    /// Conditional logits each token was sampled from (before guidance),
    /// `[H * W, V]` in raster order.
    pub logits: Tensor<T>,
}

/// `s * cond + (1 - s) * uncond`; equals `cond` exactly at `s = 1` and
/// `uncond` exactly at `s = 0`.
pub fn cfg_fuse<T: Scalar>(cond: &[T], uncond: &[T], scale: T) -> Result<Vec<T>> {
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch {
            op: "cfg_fuse",
            detail: format!("{} vs {} logits", cond.len(), uncond.len()),
        });
    }
    let rest = T::one() - scale;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| scale * c + rest * u).collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one token per row of `logits` (`rows * vocab`), consuming `rng`
/// in row order. Greedy sampling draws nothing.
pub fn sample_tokens<T: Scalar>(logits: &[T], vocab: usize, sampler: &SamplerConfig, rng: &mut rng::Rng) -> Result<Vec<Token>> {
    if vocab == 0 || !logits.len().is_multiple_of(vocab) {
        return Err(Error::ShapeMismatch {
            op: "sample_tokens",
            detail: format!("{} logits for vocab {vocab}", logits.len()),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample_tokens"));
    }
    if !sampler.greedy && !(sampler.temperature > 0.0 && sampler.temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature {}", sampler.temperature)));
    }
    let mut out = Vec::with_capacity(logits.len() / vocab);
    let mut order: Vec<usize> = Vec::with_capacity(vocab);
    let mut probs = vec![0.0f64; vocab];
    for row in logits.chunks_exact(vocab) {
        if sampler.greedy {
            out.push(argmax(row) as Token);
            continue;
        }
        order.clear();
        order.extend(0..vocab);
        let keep = if sampler.top_k == 0 { vocab } else { sampler.top_k.min(vocab) };
        if keep < vocab {
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite").then(a.cmp(&b)));
            order.truncate(keep);
            order.sort_unstable();
        }
        let max = order.iter().map(|&i| row[i].to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &i in &order {
            let p = ((row[i].to_f64() - max) / sampler.temperature).exp();
            probs[i] = p;
            sum += p;
        }
        let u: f64 = rng.random::<f64>() * sum;
        let mut acc = 0.0;
        let mut pick = *order.last().expect("vocab > 0");
        for &i in &order {
            acc += probs[i];
            if u < acc {
                pick = i;
                break;
            }
        }
        out.push(pick as Token);
    }
    Ok(out)
}

/// Prefix ids for the conditional sequence and, with guidance, the
/// unconditional one.
fn batch_prefixes(cfg: &ModelConfig, condition: Condition, guidance: &CfgConfig) -> Result<Vec<usize>> {
    let mut ids = cfg.prefix_ids(condition)?;
    if guidance.enabled {
        ids.extend(cfg.prefix_ids(Condition::Unconditional)?);
    }
    Ok(ids)
}

fn guided<T: Scalar>(rows: &[T], n: usize, vocab: usize, guidance: &CfgConfig) -> Result<Vec<T>> {
    if !guidance.enabled {
        return Ok(rows.to_vec());
    }
    cfg_fuse(&rows[..n * vocab], &rows[n * vocab..2 * n * vocab], T::of(guidance.scale))
}

fn check_guidance(guidance: &CfgConfig) -> Result<()> {
    if guidance.enabled && !(guidance.scale >= 0.0 && guidance.scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("guidance scale {}", guidance.scale)));
    }
    Ok(())
}

/// One token per step through the raster-causal path of `model`.
pub fn decode_raster<T: Scalar>(
    model: &Backbone<T>,
    condition: Condition,
    sampler: &SamplerConfig,
    guidance: &CfgConfig,
) -> Result<Decoded<T>> {
    check_guidance(guidance)?;
    let cfg = &model.config;
    let (p0, v, hw) = (cfg.prefix_len, cfg.vocab_size, cfg.grid_len());
    let batch = if guidance.enabled { 2 } else { 1 };
    let mut rng = rng::stream(sampler.seed, "sample");
    let start = Instant::now();
    let mut cache = KvCacheSet::for_backbone(cfg, cfg.mask(MaskKind::RasterCausal), batch)?;
    let prefix = batch_prefixes(cfg, condition, guidance)?;
    let positions: Vec<usize> = (0..p0).collect();
    let out = model.forward_incremental(&prefix, &positions, &mut cache)?;
    let mut invocations = 1;
    let mut rows: Vec<T> = (0..batch).flat_map(|b| out.logits.row(b * p0 + p0 - 1).to_vec()).collect();
    let mut tokens = Vec::with_capacity(hw);
    let mut cond_logits = Vec::with_capacity(hw * v);
    let mut step_times = Vec::with_capacity(hw);
    let mut step_start = start;
    for i in 0..hw {
        cond_logits.extend_from_slice(&rows[..v]);
        let g = guided(&rows, 1, v, guidance)?;
        let tok = sample_tokens(&g, v, sampler, &mut rng)?[0];
        tokens.push(tok);
        if i + 1 < hw {
            let ids = vec![tok as usize; batch];
            let out = model.forward_incremental(&ids, &[p0 + i], &mut cache)?;
            invocations += 1;
            rows = out.logits.data().to_vec();
        }
        let now = Instant::now();
        step_times.push(now - step_start);
        step_start = now;
    }
    let total_time = start.elapsed();
    Ok(Decoded {
        grid: TokenGrid::new(cfg.height, cfg.width, v, tokens)?,
        trace: DecodeTrace {
            steps: hw,
            invocations,
            widths: vec![1; hw],
            step_times,
            total_time,
            tokens: hw,
        },
        logits: Tensor::new(vec![hw, v], cond_logits)?,
    })
}

/// Anti-diagonal decoding: every position of `D_t` is sampled at once from
/// logits fused out of the previous diagonal's outputs, then the whole
/// diagonal goes through the model in one batched step.
pub fn decode_diagonal<T: Scalar>(
    model: &DualHeadModel<T>,
    condition: Condition,
    sampler: &SamplerConfig,
    guidance: &CfgConfig,
) -> Result<Decoded<T>> {
    check_guidance(guidance)?;
    let cfg = &model.config;
    let (p0, v, w) = (cfg.prefix_len, cfg.vocab_size, cfg.width);
    let batch = if guidance.enabled { 2 } else { 1 };
    let schedule = diagonal_partition(cfg.height, cfg.width)?;
    let mask = cfg.mask(MaskKind::DiagonalCausal);
    let mut rng = rng::stream(sampler.seed, "sample");
    let start = Instant::now();
    let mut cache = KvCacheSet::for_dual(cfg, &model.branch, mask, batch)?;
    let prefix = batch_prefixes(cfg, condition, guidance)?;
    let positions: Vec<usize> = (0..p0).collect();
    let mut prev = model.forward_incremental(&prefix, &positions, &mut cache)?;
    let mut invocations = 1;
    let mut prev_n = p0;
    let mut prev_first_row = 0;
    let mut tokens: Vec<Token> = vec![0; cfg.grid_len()];
    let mut cond_logits = vec![T::zero(); cfg.grid_len() * v];
    let mut step_times = Vec::with_capacity(schedule.num_diagonals());
    let mut step_start = start;
    let last = schedule.num_diagonals() - 1;
    for (t, diag) in schedule.diagonals().iter().enumerate() {
        let n = diag.len();
        // Rows of `prev` holding each target's predecessors.
        let h_row = |b: usize, at: Coord| b * prev_n + at.row - prev_first_row;
        let v_row = |b: usize, at: Coord| b * prev_n + at.row - 1 - prev_first_row;
        let mut gate_in = Vec::new();
        let mut interior = Vec::new();
        for b in 0..batch {
            for (i, &at) in diag.iter().enumerate() {
                if at.row > 0 && at.col > 0 {
                    gate_in.extend_from_slice(prev.hidden_h.row(h_row(b, at)));
                    gate_in.extend_from_slice(prev.hidden_v.row(v_row(b, at)));
                    interior.push(b * n + i);
                }
            }
        }
        let gates = crate::model::gate_rows(&model.weights.gate, &gate_in, interior.len());
        let mut fused = vec![T::zero(); batch * n * v];
        let mut gi = 0;
        for b in 0..batch {
            for (i, &at) in diag.iter().enumerate() {
                let dst = &mut fused[(b * n + i) * v..(b * n + i + 1) * v];
                match (at.row, at.col) {
                    (0, 0) => dst.copy_from_slice(prev.logits_h.row(b * prev_n + p0 - 1)),
                    (0, _) => dst.copy_from_slice(prev.logits_h.row(h_row(b, at))),
                    (_, 0) => dst.copy_from_slice(prev.logits_v.row(v_row(b, at))),
                    _ => {
                        let z = fuse_logits(gates[gi], prev.logits_h.row(h_row(b, at)), prev.logits_v.row(v_row(b, at)))?;
                        gi += 1;
                        dst.copy_from_slice(&z);
                    }
                }
            }
        }
        for (i, &at) in diag.iter().enumerate() {
            let r = at.row * w + at.col;
            cond_logits[r * v..(r + 1) * v].copy_from_slice(&fused[i * v..(i + 1) * v]);
        }
        let g = guided(&fused, n, v, guidance)?;
        let drawn = sample_tokens(&g, v, sampler, &mut rng)?;
        for (&at, &tok) in diag.iter().zip(&drawn) {
            tokens[at.row * w + at.col] = tok;
        }
        if t < last {
            let pos: Vec<usize> = diag.iter().map(|&at| mask.position(at)).collect();
            let ids: Vec<usize> = (0..batch).flat_map(|_| drawn.iter().map(|&x| x as usize)).collect();
            prev = model.forward_incremental(&ids, &pos, &mut cache)?;
            invocations += 1;
            prev_n = n;
            prev_first_row = diag[0].row;
        }
        let now = Instant::now();
        step_times.push(now - step_start);
        step_start = now;
    }
    let total_time = start.elapsed();
    Ok(Decoded {
        grid: TokenGrid::new(cfg.height, cfg.width, v, tokens)?,
        trace: DecodeTrace {
            steps: schedule.num_diagonals(),
            invocations,
            widths: schedule.widths(),
            step_times,
            total_time,
            tokens: cfg.grid_len(),
        },
        logits: Tensor::new(vec![cfg.grid_len(), v], cond_logits)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub steps: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub runs_ms: Vec<f64>,
}

impl ModeStats {
    fn from_runs(steps: usize, runs: Vec<Duration>) -> Self {
        let ms: Vec<f64> = runs.iter().map(|r| r.as_secs_f64() * 1e3).collect();
        let mut sorted = ms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            steps,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            median_ms: median,
            runs_ms: ms,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmups: usize,
    pub sampler: SamplerConfig,
    pub cfg: CfgConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 20,
            warmups: 3,
            sampler: SamplerConfig::default(),
            cfg: CfgConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub raster: ModeStats,
    pub diagonal: ModeStats,
    pub step_reduction: f64,
    /// Raster median over diagonal median.
    pub speedup: f64,
    /// Diagonal step width -> number of steps with that width.
    pub width_histogram: BTreeMap<usize, usize>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let hist: Vec<String> = self.width_histogram.iter().map(|(w, c)| format!("{w}:{c}")).collect();
        format!(
            "grid {}x{}\n\
             raster   steps {:>5}  mean {:>10.3} ms  median {:>10.3} ms\n\
             diagonal steps {:>5}  mean {:>10.3} ms  median {:>10.3} ms\n\
             step reduction {:.2}x\n\
             wall-clock speedup {:.2}x\n\
             width histogram {}\n",
            self.height,
            self.width,
            self.raster.steps,
            self.raster.mean_ms,
            self.raster.median_ms,
            self.diagonal.steps,
            self.diagonal.mean_ms,
            self.diagonal.median_ms,
            self.step_reduction,
            self.speedup,
            hist.join(" "),
        )
    }

    /// One JSON line per timed run.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (mode, stats) in [("raster", &self.raster), ("diagonal", &self.diagonal)] {
            for (i, ms) in stats.runs_ms.iter().enumerate() {
                let rec = serde_json::json!({
                    "mode": mode, "run": i, "steps": stats.steps, "ms": ms,
                    "height": self.height, "width": self.width,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        out
    }
}

/// Times raster decoding of `raster` against diagonal decoding of `dual`.
pub fn bench<T: Scalar>(
    raster: &Backbone<T>,
    dual: &DualHeadModel<T>,
    condition: Condition,
    config: &BenchConfig,
) -> Result<BenchReport> {
    let (a, b) = (&raster.config, &dual.config);
    if (a.height, a.width, a.vocab_size, a.prefix_len) != (b.height, b.width, b.vocab_size, b.prefix_len) {
        return Err(Error::ConfigMismatch(format!(
            "raster {}x{} V={} vs dual {}x{} V={}",
            a.height, a.width, a.vocab_size, b.height, b.width, b.vocab_size
        )));
    }
    if config.repetitions == 0 {
        return Err(Error::InvalidConfig("bench needs at least one repetition".into()));
    }
    let time = |diagonal: bool| -> Result<(usize, Vec<Duration>)> {
        let mut runs = Vec::with_capacity(config.repetitions);
        let mut steps = 0;
        for i in 0..config.warmups + config.repetitions {
            let sampler = SamplerConfig {
                seed: config.sampler.seed.wrapping_add(i as u64),
                ..config.sampler
            };
            let trace = if diagonal {
                decode_diagonal(dual, condition, &sampler, &config.cfg)?.trace
            } else {
                decode_raster(raster, condition, &sampler, &config.cfg)?.trace
            };
            steps = trace.steps;
            if i >= config.warmups {
                runs.push(trace.total_time);
            }
        }
        Ok((steps, runs))
    };
    let (rs, rr) = time(false)?;
    let (ds, dr) = time(true)?;
    let raster = ModeStats::from_runs(rs, rr);
    let diagonal = ModeStats::from_runs(ds, dr);
    let mut width_histogram = BTreeMap::new();
    for w in diagonal_partition(b.height, b.width)?.widths() {
        *width_histogram.entry(w).or_insert(0) += 1;
    }
    Ok(BenchReport {
        height: b.height,
        width: b.width,
        step_reduction: raster.steps as f64 / diagonal.steps as f64,
        speedup: raster.median_ms / diagonal.median_ms,
        raster,
        diagonal,
        width_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(h: usize, w: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            head_dim: 4,
            ffn_dim: 12,
            vocab_size: 5,
            num_classes: 2,
            height: h,
            width: w,
            prefix_len: 1,
            seed: 2,
        }
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_fuse(&[1.0f32], &[0.0], 2.0).unwrap(), vec![2.0]);
        let c = [0.3f32, -1.7, 2.9];
        let u = [5.1f32, 0.2, -0.4];
        assert_eq!(cfg_fuse(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_fuse(&c, &u, 0.0).unwrap(), u.to_vec());
        assert!(cfg_fuse(&c, &u[..2], 1.0).is_err());
    }

    #[test]
    fn greedy_and_ties() {
        let mut r = rng::stream(0, "t");
        let s = SamplerConfig::greedy();
        assert_eq!(sample_tokens(&[0.1f32, 3.0, 0.2], 3, &s, &mut r).unwrap(), vec![1]);
        assert_eq!(sample_tokens(&[2.0f32, 1.0, 2.0], 3, &s, &mut r).unwrap(), vec![0]);
        assert!(sample_tokens(&[f32::NAN, 1.0], 2, &s, &mut r).is_err());
    }

    #[test]
    fn top1_is_greedy() {
        let mut r = rng::stream(1, "t");
        let logits = [0.5f32, 2.0, 2.0, -1.0, 1.9];
        for temp in [0.1, 1.0, 50.0] {
            let s = SamplerConfig {
                temperature: temp,
                top_k: 1,
                ..Default::default()
            };
            for _ in 0..20 {
                assert_eq!(sample_tokens(&logits, 5, &s, &mut r).unwrap(), vec![1]);
            }
        }
    }

    #[test]
    fn bad_temperature() {
        let mut r = rng::stream(1, "t");
        let s = SamplerConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(sample_tokens(&[0.0f32, 1.0], 2, &s, &mut r).is_err());
    }

    #[test]
    fn step_counts_small() {
        for (h, w) in [(1, 1), (2, 3), (4, 4)] {
            let cfg = tiny(h, w);
            let base = Backbone::<f32>::init(cfg.clone()).unwrap();
            let dual = DualHeadModel::build_from_pretrained(&base, 1).unwrap();
            let s = SamplerConfig::default();
            let r = decode_raster(&base, Condition::Class(0), &s, &CfgConfig::default()).unwrap();
            assert_eq!((r.trace.steps, r.trace.invocations), (h * w, h * w));
            let d = decode_diagonal(&dual, Condition::Class(0), &s, &CfgConfig::default()).unwrap();
            assert_eq!((d.trace.steps, d.trace.invocations), (h + w - 1, h + w - 1));
            assert_eq!(d.trace.widths.iter().sum::<usize>(), h * w);
        }
    }

    #[test]
    fn cfg_scale_one_is_conditional_only() {
        let cfg = tiny(3, 4);
        let base = Backbone::<f32>::init(cfg.clone()).unwrap();
        let dual = DualHeadModel::build_from_pretrained(&base, 1).unwrap();
        let s = SamplerConfig {
            seed: 11,
            ..Default::default()
        };
        let on = CfgConfig {
            scale: 1.0,
            enabled: true,
        };
        let a = decode_diagonal(&dual, Condition::Class(1), &s, &on).unwrap();
        let b = decode_diagonal(&dual, Condition::Class(1), &s, &CfgConfig::disabled()).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.logits, b.logits);
        let a = decode_raster(&base, Condition::Class(1), &s, &on).unwrap();
        let b = decode_raster(&base, Condition::Class(1), &s, &CfgConfig::disabled()).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn bench_dims_must_agree() {
        let base = Backbone::<f32>::init(tiny(2, 2)).unwrap();
        let other = Backbone::<f32>::init(tiny(3, 2)).unwrap();
        let dual = DualHeadModel::build_from_pretrained(&other, 1).unwrap();
        assert!(bench(&base, &dual, Condition::Class(0), &BenchConfig::default()).is_err());
    }

    #[test]
    fn bench_report_fields() {
        let cfg = tiny(4, 4);
        let base = Backbone::<f32>::init(cfg.clone()).unwrap();
        let dual = DualHeadModel::build_from_pretrained(&base, 1).unwrap();
        let conf = BenchConfig {
            repetitions: 4,
            warmups: 1,
            ..Default::default()
        };
        let r = bench(&base, &dual, Condition::Class(0), &conf).unwrap();
        assert_eq!(r.raster.runs_ms.len(), 4);
        assert_eq!((r.raster.steps, r.diagonal.steps), (16, 7));
        assert_eq!(r.width_histogram.values().sum::<usize>(), 7);
        assert_eq!(r.width_histogram[&4], 1);
        assert_eq!(r.to_jsonl().lines().count(), 8);
        assert!(r.to_text().contains("step reduction 2.29x"));
    }
}
