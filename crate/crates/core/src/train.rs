//! Raster pretraining and two-stage dual-head adaptation.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{eval_nll, EvalModel};
use crate::grid::MaskKind;
use crate::model::{
    backbone_graph, dual_graph, is_decayed, Backbone, Condition, DualGraph, DualHeadModel, GateMode, ModelConfig,
};
use crate::nn::{AdamW, AdamWConfig, Graph, LrSchedule, Scalar, Tensor, Var};
use crate::rng::{self, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_aux: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_steps: usize,
    /// Leading fraction of steps trained with the backbone frozen.
    pub stage1_fraction: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Rate multiplier for inherited parameters in stage 2.
    pub backbone_multiplier: f64,
    /// Probability of replacing a sample's class with the unconditional id.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Held-out NLL every this many steps (0: final step only).
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Emit a resumable checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            stage1_fraction: 0.2,
            batch_size: 8,
            base_lr: 2e-5,
            warmup_steps: 0,
            backbone_multiplier: 0.2,
            cond_dropout: 0.1,
            seed: 0,
            eval_every: 100,
            eval_samples: 64,
            checkpoint_every: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad(format!("stage-1 fraction {}", self.stage1_fraction));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad(format!("batch {} and steps {} must be positive", self.batch_size, self.total_steps));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || self.backbone_multiplier.is_nan() || self.backbone_multiplier < 0.0 {
            return bad(format!("learning rate {} / multiplier {}", self.base_lr, self.backbone_multiplier));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("condition dropout {}", self.cond_dropout));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup {} exceeds {} steps", self.warmup_steps, self.total_steps));
        }
        Ok(())
    }

    /// First stage-2 step, `floor(fraction * S)`.
    pub fn stage_boundary(&self) -> usize {
        let x = self.stage1_fraction * self.total_steps as f64;
        let r = x.round();
        // Guard against 0.2 * 1000 landing a hair under 200.
        if (x - r).abs() <= 1e-9 * (self.total_steps.max(1) as f64) {
            r as usize
        } else {
            x.floor() as usize
        }
    }

    pub fn stage_at(&self, step: usize) -> u8 {
        if step < self.stage_boundary() {
            1
        } else {
            2
        }
    }

    /// One cosine schedule across both stages.
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.base_lr, self.total_steps, self.warmup_steps)
    }
}

/// One line of the metrics log. Loss components that do not apply are
/// `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: Option<u8>,
    pub lr: f64,
    #[serde(rename = "L_fuse")]
    pub l_fuse: Option<f64>,
    #[serde(rename = "L_H")]
    pub l_h: Option<f64>,
    #[serde(rename = "L_V")]
    pub l_v: Option<f64>,
    pub total: f64,
    pub eval_nll: Option<f64>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

/// Receives training progress.
pub trait Observer {
    fn on_metrics(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct Collect {
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

impl Observer for Collect {
    fn on_metrics(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoints.push(checkpoint.clone());
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub fuse: Var,
    pub h: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub fuse: f64,
    pub h: f64,
    pub v: f64,
    pub total: f64,
}

/// `L_fuse` over every target, `L_H` over rows with a right neighbour,
/// `L_V` over rows with a lower neighbour, and
/// `total = L_fuse + lambda_aux * (L_H + L_V)`.
pub fn compute_losses<T: Scalar>(g: &mut Graph<T>, out: &DualGraph, weights: &LossWeights) -> Result<LossVars> {
    if !(weights.lambda_aux >= 0.0 && weights.lambda_aux.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda_aux {}", weights.lambda_aux)));
    }
    let l = &out.layout;
    let fuse = g.cross_entropy(out.fused, &l.targets)?;
    let aux = |g: &mut Graph<T>, logits: Var, rows: &[usize], targets: &[usize]| -> Result<Var> {
        if rows.is_empty() {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let x = g.gather_rows(logits, rows)?;
        g.cross_entropy(x, targets)
    };
    let h = aux(g, out.logits_h, &l.aux_h_rows, &l.aux_h_targets)?;
    let v = aux(g, out.logits_v, &l.aux_v_rows, &l.aux_v_targets)?;
    let hv = g.add(h, v)?;
    let scaled = g.scale(hv, T::of(weights.lambda_aux))?;
    let total = g.add(fuse, scaled)?;
    Ok(LossVars { total, fuse, h, v })
}

pub fn loss_values<T: Scalar>(g: &Graph<T>, vars: &LossVars) -> Losses {
    let get = |v: Var| g.value(v).data()[0].to_f64();
    Losses {
        fuse: get(vars.fuse),
        h: get(vars.h),
        v: get(vars.v),
        total: get(vars.total),
    }
}

/// Rows of the per-position logits that predict each grid token under
/// next-token training.
fn raster_rows(cfg: &ModelConfig, batch: usize) -> Vec<usize> {
    let (s, p0, hw) = (cfg.seq_len(), cfg.prefix_len, cfg.grid_len());
    (0..batch).flat_map(|b| (0..hw).map(move |i| b * s + p0 - 1 + i)).collect()
}

fn check_data(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let h = &data.header;
    if (h.height, h.width, h.vocab) != (cfg.height, cfg.width, cfg.vocab_size) || h.classes > cfg.num_classes {
        return Err(Error::ConfigMismatch(format!(
            "dataset {}x{} V={} with {} classes vs model {}x{} V={} with {} classes",
            h.height, h.width, h.vocab, h.classes, cfg.height, cfg.width, cfg.vocab_size, cfg.num_classes
        )));
    }
    Ok(())
}

/// Draws `batch` training sequences with condition dropout.
fn draw_batch(
    cfg: &ModelConfig,
    train: &[&Sample],
    schedule: &TrainSchedule,
    rng: &mut rng::Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids = Vec::with_capacity(schedule.batch_size * cfg.seq_len());
    let mut targets = Vec::with_capacity(schedule.batch_size * cfg.grid_len());
    for _ in 0..schedule.batch_size {
        let s = train[rng.random_range(0..train.len())];
        let drop = rng.random::<f64>() < schedule.cond_dropout;
        let cond = if drop {
            Condition::Unconditional
        } else {
            Condition::Class(s.class)
        };
        ids.extend(cfg.sequence(&s.grid, cond)?);
        targets.extend(s.grid.tokens().iter().map(|&t| t as usize));
    }
    Ok((ids, targets))
}

/// Applies AdamW to every slot whose graph leaf received a gradient.
fn apply_updates(
    opt: &mut AdamW,
    visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<f32>)),
    vars: &BTreeMap<String, Var>,
    g: &Graph<f32>,
    lr: f64,
    multipliers: &dyn Fn(&str) -> Option<f64>,
) -> Result<()> {
    let mut err = None;
    visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let (Some(&var), Some(mult)) = (vars.get(&name), multipliers(&name)) else {
            return;
        };
        if let Some(grad) = g.grad(var) {
            let rate = (lr * mult) as f32;
            if let Err(e) = opt.update(&name, t.data_mut(), grad, rate, is_decayed(&name)) {
                err = Some(e);
            }
        }
    });
    opt.finish_step();
    err.map_or(Ok(()), Err)
}

fn var_map(visit: impl FnOnce(&mut dyn FnMut(String, &Var))) -> BTreeMap<String, Var> {
    let mut m = BTreeMap::new();
    visit(&mut |n, v| {
        m.insert(n, *v);
    });
    m
}

fn eval_subset(data: &Dataset, n: usize) -> Vec<&Sample> {
    let mut v = data.split(Split::Val);
    v.truncate(n);
    v
}

fn should_eval(schedule: &TrainSchedule, step: usize) -> bool {
    step + 1 == schedule.total_steps || (schedule.eval_every > 0 && (step + 1).is_multiple_of(schedule.eval_every))
}

fn should_checkpoint(schedule: &TrainSchedule, step: usize) -> bool {
    schedule.checkpoint_every > 0 && (step + 1).is_multiple_of(schedule.checkpoint_every) && step + 1 < schedule.total_steps
}

/// Next-token training of a fresh raster backbone.
pub fn pretrain_raster(config: &ModelConfig, data: &Dataset, schedule: &TrainSchedule, obs: &mut dyn Observer) -> Result<Checkpoint> {
    let model = Backbone::<f32>::init(config.clone())?;
    let opt = AdamW::new(schedule.optimizer);
    run_pretrain(model, opt, rng::stream(schedule.seed, "train"), 0, data, schedule, obs)
}

/// Continues a pretraining run from one of its checkpoints.
pub fn resume_pretrain(ckpt: &Checkpoint, data: &Dataset, schedule: &TrainSchedule, obs: &mut dyn Observer) -> Result<Checkpoint> {
    if ckpt.is_dual() {
        return Err(Error::ConfigMismatch("pretraining resumes from a raster checkpoint".into()));
    }
    let (opt, rng) = resume_state(ckpt)?;
    run_pretrain(ckpt.to_raster()?, opt, rng, ckpt.step as usize, data, schedule, obs)
}

fn resume_state(ckpt: &Checkpoint) -> Result<(AdamW, rng::Rng)> {
    let opt = ckpt
        .optimizer
        .clone()
        .ok_or_else(|| Error::ConfigMismatch("checkpoint has no optimizer state".into()))?;
    let rng = ckpt
        .rng
        .ok_or_else(|| Error::ConfigMismatch("checkpoint has no RNG state".into()))?
        .restore();
    Ok((opt, rng))
}

fn run_pretrain(
    mut model: Backbone<f32>,
    mut opt: AdamW,
    mut rng: rng::Rng,
    start: usize,
    data: &Dataset,
    schedule: &TrainSchedule,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    schedule.validate()?;
    let cfg = model.config.clone();
    check_data(&cfg, data)?;
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    let val = eval_subset(data, schedule.eval_samples);
    let mask = cfg.mask(MaskKind::RasterCausal);
    let lrs = schedule.lr_schedule();
    let rows = raster_rows(&cfg, schedule.batch_size);
    for step in start..schedule.total_steps {
        let lr = lrs.lr_at(step)?;
        let (ids, targets) = draw_batch(&cfg, &train, schedule, &mut rng)?;
        let mut g = Graph::new();
        let w = model.bind(&mut g, &|_| true)?;
        let out = backbone_graph(&mut g, &cfg, &w, &ids, schedule.batch_size, &mask)?;
        let logits = g.gather_rows(out.logits, &rows)?;
        let loss = g.cross_entropy(logits, &targets)?;
        g.backward(loss)?;
        let total = g.value(loss).data()[0] as f64;
        let vars = var_map(|f| w.visit(f));
        apply_updates(&mut opt, |f| model.weights.visit_mut(f), &vars, &g, lr, &|_| Some(1.0))?;
        let eval = if should_eval(schedule, step) && !val.is_empty() {
            Some(eval_nll(EvalModel::Raster(&model), &val, MaskKind::RasterCausal, 8)?.nll)
        } else {
            None
        };
        obs.on_metrics(&MetricRecord {
            step,
            stage: None,
            lr,
            l_fuse: None,
            l_h: None,
            l_v: None,
            total,
            eval_nll: eval,
        })?;
        if should_checkpoint(schedule, step) {
            obs.on_checkpoint(&Checkpoint::from_raster(
                &model,
                Some(opt.clone()),
                step as u64 + 1,
                Some(RngState::capture(&rng)),
            ))?;
        }
    }
    Ok(Checkpoint::from_raster(
        &model,
        Some(opt),
        schedule.total_steps as u64,
        Some(RngState::capture(&rng)),
    ))
}

/// Builds the dual-head model from a raster checkpoint and trains it: the
/// backbone is frozen before the stage boundary and trains at the reduced
/// multiplier after it.
pub fn adapt(
    base: &Checkpoint,
    depth: usize,
    data: &Dataset,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    if base.is_dual() {
        return Err(Error::ConfigMismatch("adaptation starts from a raster checkpoint".into()));
    }
    let model = DualHeadModel::build_from_pretrained(&base.to_raster()?, depth)?;
    let opt = AdamW::new(schedule.optimizer);
    run_adapt(model, opt, rng::stream(schedule.seed, "adapt"), 0, data, schedule, weights, obs)
}

pub fn resume_adapt(
    ckpt: &Checkpoint,
    data: &Dataset,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    let (opt, rng) = resume_state(ckpt)?;
    run_adapt(ckpt.to_dual()?, opt, rng, ckpt.step as usize, data, schedule, weights, obs)
}

#[allow(clippy::too_many_arguments)]
fn run_adapt(
    mut model: DualHeadModel<f32>,
    mut opt: AdamW,
    mut rng: rng::Rng,
    start: usize,
    data: &Dataset,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    obs: &mut dyn Observer,
) -> Result<Checkpoint> {
    schedule.validate()?;
    let cfg = model.config.clone();
    check_data(&cfg, data)?;
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    let val = eval_subset(data, schedule.eval_samples);
    let mask = cfg.mask(MaskKind::DiagonalCausal);
    let lrs = schedule.lr_schedule();
    for step in start..schedule.total_steps {
        let stage = schedule.stage_at(step);
        let sets = model.trainable_sets(stage, schedule.backbone_multiplier as f32)?;
        let mult: BTreeMap<&str, f64> = sets.trainable.iter().map(|(n, m)| (n.as_str(), *m as f64)).collect();
        let lr = lrs.lr_at(step)?;
        let (ids, _) = draw_batch(&cfg, &train, schedule, &mut rng)?;
        let mut g = Graph::new();
        let w = model.bind(&mut g, &|n| mult.contains_key(n))?;
        let out = dual_graph(&mut g, &cfg, &model.branch, &w, &ids, schedule.batch_size, &mask, GateMode::Learned)?;
        let lv = compute_losses(&mut g, &out, weights)?;
        g.backward(lv.total)?;
        let losses = loss_values(&g, &lv);
        let vars = var_map(|f| w.visit(f));
        apply_updates(&mut opt, |f| model.weights.visit_mut(f), &vars, &g, lr, &|n| mult.get(n).copied())?;
        let eval = if should_eval(schedule, step) && !val.is_empty() {
            Some(eval_nll(EvalModel::Dual(&model), &val, MaskKind::DiagonalCausal, 8)?.nll)
        } else {
            None
        };
        obs.on_metrics(&MetricRecord {
            step,
            stage: Some(stage),
            lr,
            l_fuse: Some(losses.fuse),
            l_h: Some(losses.h),
            l_v: Some(losses.v),
            total: losses.total,
            eval_nll: eval,
        })?;
        if should_checkpoint(schedule, step) {
            obs.on_checkpoint(&Checkpoint::from_dual(
                &model,
                Some(opt.clone()),
                step as u64 + 1,
                Some(RngState::capture(&rng)),
            ))?;
        }
    }
    Ok(Checkpoint::from_dual(
        &model,
        Some(opt),
        schedule.total_steps as u64,
        Some(RngState::capture(&rng)),
    ))
}
