//! Linear probes for vertical (next-row) prediction from frozen raster
//! features.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::MaskKind;
use crate::model::{Backbone, Condition, ModelConfig, INIT_STD};
use crate::nn::{AdamW, AdamWConfig, Graph, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_samples: usize,
    /// Also train one head per individual layer.
    pub per_layer: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            eval_samples: 64,
            per_layer: true,
        }
    }
}

/// Probe steps for a pretraining run of `pretrain_steps`: 5%, at least one.
pub fn probe_budget(pretrain_steps: usize) -> usize {
    (pretrain_steps as f64 * 0.05).round().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Softmax-normalized aggregation weight per layer.
    pub layer_weights: Vec<f64>,
    /// Held-out vertical NLL of the aggregated probe.
    pub aggregate_nll: f64,
    /// Held-out vertical NLL of each single-layer probe (empty if disabled).
    pub per_layer_nll: Vec<f64>,
    pub max_weight_layer: usize,
    pub deepest_is_max: bool,
    pub steps: usize,
}

impl ProbeResult {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, w) in self.layer_weights.iter().enumerate() {
            let nll = self.per_layer_nll.get(l).map_or(String::new(), |n| format!("  single-layer nll {n:.4}"));
            s.push_str(&format!("layer {l:>2}  weight {w:.4}{nll}\n"));
        }
        s.push_str(&format!("aggregate nll {:.4}\n", self.aggregate_nll));
        s.push_str(&format!(
            "max weight at layer {} (deepest layer {})\n",
            self.max_weight_layer,
            if self.deepest_is_max { "is maximal" } else { "is not maximal" }
        ));
        s
    }
}

struct Head {
    gain: Tensor<f32>,
    proj: Tensor<f32>,
}

impl Head {
    fn new(cfg: &ModelConfig, r: &mut rng::Rng) -> Self {
        let dist = Normal::new(0.0, INIT_STD).expect("positive std");
        Self {
            gain: Tensor::full(&[cfg.d_model], 1.0),
            proj: Tensor::from_fn(&[cfg.d_model, cfg.vocab_size], |_| dist.sample(r) as f32),
        }
    }

    fn bind(&self, g: &mut Graph<f32>, train: bool) -> (Var, Var) {
        (g.leaf(self.gain.clone(), train), g.leaf(self.proj.clone(), train))
    }
}

fn head_loss(g: &mut Graph<f32>, x: Var, (gain, proj): (Var, Var), targets: &[usize]) -> Result<Var> {
    let h = g.rms_norm(x, gain)?;
    let logits = g.matmul(h, proj)?;
    g.cross_entropy(logits, targets)
}

/// Per-layer features at every position with a lower neighbour, and the
/// lower neighbour's token.
fn features(base: &Backbone<f32>, samples: &[&Sample]) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let cfg = &base.config;
    let mut ids = Vec::with_capacity(samples.len() * cfg.seq_len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        ids.extend(cfg.sequence(&s.grid, Condition::Class(s.class))?);
        for p in 0..cfg.height - 1 {
            for q in 0..cfg.width {
                rows.push(b * cfg.seq_len() + cfg.prefix_len + p * cfg.width + q);
                targets.push(s.grid.tokens()[(p + 1) * cfg.width + q] as usize);
            }
        }
    }
    let out = base.forward_full(&ids, samples.len(), &cfg.mask(MaskKind::RasterCausal))?;
    let d = cfg.d_model;
    let feats = out
        .hidden
        .iter()
        .map(|h| {
            let data: Vec<f32> = rows.iter().flat_map(|&r| h.row(r).iter().copied()).collect();
            Tensor::new(vec![rows.len(), d], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((feats, targets))
}

fn softmax(alpha: &[f32]) -> Vec<f64> {
    let max = alpha.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = alpha.iter().map(|&a| (a as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Trains, on frozen base features, a head over a learned softmax-weighted
/// sum of all layer outputs and optionally one head per layer, all
/// predicting the token directly below each position.
pub fn linear_probe(base: &Checkpoint, data: &Dataset, config: &ProbeConfig) -> Result<ProbeResult> {
    if base.is_dual() {
        return Err(Error::ConfigMismatch("the probe runs on a raster checkpoint".into()));
    }
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("probe needs positive steps and batch size".into()));
    }
    let model = base.to_raster()?;
    let cfg = model.config.clone();
    if cfg.height < 2 {
        return Err(Error::InvalidConfig("vertical probing needs at least two rows".into()));
    }
    let train = data.split(Split::Train);
    let mut val = data.split(Split::Val);
    val.truncate(config.eval_samples);
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("probe needs train and validation samples".into()));
    }
    let layers = cfg.num_layers;
    let mut init = rng::stream(config.seed, "probe.init");
    let mut alpha = Tensor::<f32>::zeros(&[1, layers]);
    let mut agg = Head::new(&cfg, &mut init);
    let mut singles: Vec<Head> = if config.per_layer {
        (0..layers).map(|_| Head::new(&cfg, &mut init)).collect()
    } else {
        Vec::new()
    };
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut r = rng::stream(config.seed, "probe");
    let lr = config.lr as f32;
    for _ in 0..config.steps {
        let batch: Vec<&Sample> = (0..config.batch_size).map(|_| train[r.random_range(0..train.len())]).collect();
        let (feats, targets) = features(&model, &batch)?;
        let mut g = Graph::new();
        let xs: Vec<Var> = feats.iter().map(|f| g.constant(f.clone())).collect();
        let a = g.leaf(alpha.clone(), true);
        let wts = g.softmax(a)?;
        let mixed = g.weighted_sum(wts, &xs)?;
        let hv = agg.bind(&mut g, true);
        let mut total = head_loss(&mut g, mixed, hv, &targets)?;
        let mut single_vars = Vec::new();
        for (l, h) in singles.iter().enumerate() {
            let v = h.bind(&mut g, true);
            let loss = head_loss(&mut g, xs[l], v, &targets)?;
            total = g.add(total, loss)?;
            single_vars.push(v);
        }
        g.backward(total)?;
        opt.update("alpha", alpha.data_mut(), g.grad(a).expect("alpha is trainable"), lr, false)?;
        let mut step_head = |name: &str, h: &mut Head, (gv, pv): (Var, Var)| -> Result<()> {
            opt.update(&format!("{name}.norm"), h.gain.data_mut(), &g.grad_or_zero(gv), lr, false)?;
            opt.update(&format!("{name}.proj"), h.proj.data_mut(), &g.grad_or_zero(pv), lr, true)
        };
        step_head("aggregate", &mut agg, hv)?;
        for (l, (h, v)) in singles.iter_mut().zip(single_vars).enumerate() {
            step_head(&format!("layer{l}"), h, v)?;
        }
        opt.finish_step();
    }

    let weights = softmax(alpha.data());
    let mut agg_sum = 0.0;
    let mut single_sum = vec![0.0; singles.len()];
    let mut count = 0usize;
    for chunk in val.chunks(8) {
        let (feats, targets) = features(&model, chunk)?;
        let mut g = Graph::new();
        let xs: Vec<Var> = feats.iter().map(|f| g.constant(f.clone())).collect();
        let a = g.constant(alpha.clone());
        let wts = g.softmax(a)?;
        let mixed = g.weighted_sum(wts, &xs)?;
        let hv = agg.bind(&mut g, false);
        let loss = head_loss(&mut g, mixed, hv, &targets)?;
        agg_sum += g.value(loss).data()[0] as f64 * targets.len() as f64;
        for (l, h) in singles.iter().enumerate() {
            let v = h.bind(&mut g, false);
            let loss = head_loss(&mut g, xs[l], v, &targets)?;
            single_sum[l] += g.value(loss).data()[0] as f64 * targets.len() as f64;
        }
        count += targets.len();
    }
    let max_weight_layer = (0..layers)
        .max_by(|&i, &j| weights[i].partial_cmp(&weights[j]).expect("finite weights").then(j.cmp(&i)))
        .expect("at least one layer");
    Ok(ProbeResult {
        deepest_is_max: max_weight_layer == layers - 1,
        max_weight_layer,
        layer_weights: weights,
        aggregate_nll: agg_sum / count as f64,
        per_layer_nll: single_sum.iter().map(|s| s / count as f64).collect(),
        steps: config.steps,
    })
}
