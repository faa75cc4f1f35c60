//! Run configuration: flat `section.key = value` text with three layers of
//! precedence (defaults < file < command-line flags).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flashar_core::decode::{CfgConfig, SamplerConfig};
use flashar_core::model::ModelConfig;
use flashar_core::train::{LossWeights, TrainSchedule};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Raster,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub path: PathBuf,
    pub per_class: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSection {
    pub mode: DecodeMode,
    pub count: usize,
    /// `None` cycles through the classes.
    pub class: Option<usize>,
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSection {
    /// `None`: 5% of `pretrain.steps`.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub per_layer: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// Validation samples for NLL; 0 uses the whole split.
    pub samples: usize,
    pub batch: usize,
    /// Decoded grids scored for pattern validity; 0 skips decoding.
    pub validity_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSection {
    pub repetitions: usize,
    pub warmups: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSection {
    /// Model to adapt, probe, sample from, evaluate or bench.
    pub path: Option<PathBuf>,
    /// Raster baseline for `bench`; defaults to the dual model's
    /// horizontal path.
    pub base: Option<PathBuf>,
    /// Resumable checkpoint to continue `pretrain` or `adapt` from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataSection,
    /// `seed` is ignored here; the run seed is used.
    pub model: ModelConfig,
    /// `None`: one layer below the top.
    pub branch_depth: Option<usize>,
    pub pretrain: TrainSchedule,
    pub adapt: TrainSchedule,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
    pub cfg: CfgConfig,
    pub sample: SampleSection,
    pub probe: ProbeSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub checkpoint: CheckpointSection,
    /// Sample or bench a freshly initialized model instead of a checkpoint.
    pub random_init: bool,
    sources: BTreeMap<&'static str, Source>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            data: DataSection {
                path: PathBuf::from("data/synthetic.fagd"),
                per_class: 2750,
                noise: 0.05,
            },
            model: ModelConfig::default(),
            branch_depth: None,
            pretrain: TrainSchedule {
                total_steps: 600,
                base_lr: 1e-3,
                warmup_steps: 30,
                checkpoint_every: 200,
                ..TrainSchedule::default()
            },
            adapt: TrainSchedule {
                total_steps: 1500,
                checkpoint_every: 500,
                ..TrainSchedule::default()
            },
            loss: LossWeights::default(),
            sampler: SamplerConfig::default(),
            cfg: CfgConfig::default(),
            sample: SampleSection {
                mode: DecodeMode::Diagonal,
                count: 8,
                class: None,
                cell: 8,
            },
            probe: ProbeSection {
                steps: None,
                batch_size: 8,
                lr: 1e-3,
                eval_samples: 64,
                per_layer: true,
            },
            eval: EvalSection {
                samples: 512,
                batch: 8,
                validity_samples: 0,
            },
            bench: BenchSection {
                repetitions: 20,
                warmups: 3,
                class: 0,
            },
            checkpoint: CheckpointSection {
                path: None,
                base: None,
                resume: None,
            },
            random_init: false,
            sources: BTreeMap::new(),
        }
    }
}

/// Conversion between typed fields and their text form.
trait Value: Sized {
    fn parse(raw: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(raw: &str) -> Result<Self, String> {
                raw.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, f32, bool);

impl Value for PathBuf {
    fn parse(raw: &str) -> Result<Self, String> {
        if raw.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(raw))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl Value for DecodeMode {
    fn parse(raw: &str) -> Result<Self, String> {
        match raw {
            "raster" => Ok(DecodeMode::Raster),
            "diagonal" => Ok(DecodeMode::Diagonal),
            _ => Err("expected raster or diagonal".into()),
        }
    }
    fn show(&self) -> String {
        match self {
            DecodeMode::Raster => "raster".into(),
            DecodeMode::Diagonal => "diagonal".into(),
        }
    }
}

/// Optional numbers use `auto`, optional paths use `none`.
impl Value for Option<usize> {
    fn parse(raw: &str) -> Result<Self, String> {
        if raw == "auto" {
            return Ok(None);
        }
        usize::parse(raw).map(Some)
    }
    fn show(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl Value for Option<PathBuf> {
    fn parse(raw: &str) -> Result<Self, String> {
        if raw == "none" {
            return Ok(None);
        }
        PathBuf::parse(raw).map(Some)
    }
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
    }
}

macro_rules! fields {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every configuration key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(Value::show(&self.$($field).+)),)*
                    _ => None,
                }
            }

            fn assign(&mut self, key: &str, raw: &str) -> Result<&'static str, String> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse(raw)?;
                        Ok($key)
                    })*
                    _ => Err("unknown key".into()),
                }
            }
        }
    };
}

fields! {
    "seed" => seed;
    "run.dir" => run_dir;
    "data.path" => data.path;
    "data.per_class" => data.per_class;
    "data.noise" => data.noise;
    "model.num_layers" => model.num_layers;
    "model.d_model" => model.d_model;
    "model.num_heads" => model.num_heads;
    "model.head_dim" => model.head_dim;
    "model.ffn_dim" => model.ffn_dim;
    "model.vocab_size" => model.vocab_size;
    "model.num_classes" => model.num_classes;
    "model.height" => model.height;
    "model.width" => model.width;
    "model.prefix_len" => model.prefix_len;
    "branch.depth" => branch_depth;
    "pretrain.steps" => pretrain.total_steps;
    "pretrain.batch_size" => pretrain.batch_size;
    "pretrain.lr" => pretrain.base_lr;
    "pretrain.warmup_steps" => pretrain.warmup_steps;
    "pretrain.cond_dropout" => pretrain.cond_dropout;
    "pretrain.eval_every" => pretrain.eval_every;
    "pretrain.eval_samples" => pretrain.eval_samples;
    "pretrain.checkpoint_every" => pretrain.checkpoint_every;
    "pretrain.beta1" => pretrain.optimizer.beta1;
    "pretrain.beta2" => pretrain.optimizer.beta2;
    "pretrain.eps" => pretrain.optimizer.eps;
    "pretrain.weight_decay" => pretrain.optimizer.weight_decay;
    "adapt.steps" => adapt.total_steps;
    "adapt.stage1_fraction" => adapt.stage1_fraction;
    "adapt.batch_size" => adapt.batch_size;
    "adapt.lr" => adapt.base_lr;
    "adapt.warmup_steps" => adapt.warmup_steps;
    "adapt.backbone_multiplier" => adapt.backbone_multiplier;
    "adapt.cond_dropout" => adapt.cond_dropout;
    "adapt.eval_every" => adapt.eval_every;
    "adapt.eval_samples" => adapt.eval_samples;
    "adapt.checkpoint_every" => adapt.checkpoint_every;
    "adapt.beta1" => adapt.optimizer.beta1;
    "adapt.beta2" => adapt.optimizer.beta2;
    "adapt.eps" => adapt.optimizer.eps;
    "adapt.weight_decay" => adapt.optimizer.weight_decay;
    "loss.lambda_aux" => loss.lambda_aux;
    "sampler.temperature" => sampler.temperature;
    "sampler.top_k" => sampler.top_k;
    "sampler.greedy" => sampler.greedy;
    "cfg.enabled" => cfg.enabled;
    "cfg.scale" => cfg.scale;
    "sample.mode" => sample.mode;
    "sample.count" => sample.count;
    "sample.class" => sample.class;
    "sample.cell" => sample.cell;
    "probe.steps" => probe.steps;
    "probe.batch_size" => probe.batch_size;
    "probe.lr" => probe.lr;
    "probe.eval_samples" => probe.eval_samples;
    "probe.per_layer" => probe.per_layer;
    "eval.samples" => eval.samples;
    "eval.batch" => eval.batch;
    "eval.validity_samples" => eval.validity_samples;
    "bench.repetitions" => bench.repetitions;
    "bench.warmups" => bench.warmups;
    "bench.class" => bench.class;
    "checkpoint.path" => checkpoint.path;
    "checkpoint.base" => checkpoint.base;
    "checkpoint.resume" => checkpoint.resume;
    "init.random" => random_init;
}

/// `key = value` pairs of a config text; `#` starts a comment line.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `KEY=VALUE` flag argument.
pub fn parse_assignment(arg: &str) -> Result<(String, String), CliError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got {arg:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str, source: Source) -> Result<(), CliError> {
        let key = self
            .assign(key, raw)
            .map_err(|e| CliError::Config(format!("{key} = {raw:?}: {e}")))?;
        self.sources.insert(key, source);
        Ok(())
    }

    pub fn source(&self, key: &str) -> Source {
        self.sources.get(key).copied().unwrap_or(Source::Default)
    }

    /// Defaults, then the file at `path` (if any), then `flags` in order.
    pub fn resolve(path: Option<&Path>, flags: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
            for (k, v) in parse_text(&text)? {
                cfg.set(&k, &v, Source::File)?;
            }
        }
        for (k, v) in flags {
            cfg.set(k, v, Source::Flag)?;
        }
        Ok(cfg)
    }

    /// Every key with its resolved value, parseable by [`parse_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let head = key.split_once('.').map_or("", |(s, _)| s);
            if head != section && !out.is_empty() {
                out.push('\n');
            }
            section = head;
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn depth(&self) -> usize {
        self.branch_depth.unwrap_or(self.model.num_layers.saturating_sub(1))
    }

    pub fn pretrain_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn adapt_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed,
            ..self.adapt.clone()
        }
    }

    pub fn probe_steps(&self) -> usize {
        self.probe
            .steps
            .unwrap_or_else(|| flashar_core::probe::probe_budget(self.pretrain.total_steps))
    }

    /// Range checks that the core does not make on its own.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pretrain_schedule().validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        self.adapt_schedule().validate().map_err(|e| CliError::Config(format!("adapt: {e}")))?;
        let depth = self.depth();
        if depth == 0 || depth > self.model.num_layers {
            return bad(format!("branch.depth {depth} outside 1..={}", self.model.num_layers));
        }
        if !(0.0..1.0).contains(&self.data.noise) {
            return bad(format!("data.noise {} outside [0, 1)", self.data.noise));
        }
        if self.data.per_class == 0 {
            return bad("data.per_class must be positive".into());
        }
        if !(self.loss.lambda_aux >= 0.0 && self.loss.lambda_aux.is_finite()) {
            return bad(format!("loss.lambda_aux {}", self.loss.lambda_aux));
        }
        if !self.sampler.greedy && !(self.sampler.temperature > 0.0 && self.sampler.temperature.is_finite()) {
            return bad(format!("sampler.temperature {}", self.sampler.temperature));
        }
        if self.cfg.enabled && !(self.cfg.scale >= 0.0 && self.cfg.scale.is_finite()) {
            return bad(format!("cfg.scale {}", self.cfg.scale));
        }
        if let Some(c) = self.sample.class {
            if c >= self.model.num_classes {
                return bad(format!("sample.class {c} >= model.num_classes {}", self.model.num_classes));
            }
        }
        if self.bench.class >= self.model.num_classes {
            return bad(format!("bench.class {} >= model.num_classes", self.bench.class));
        }
        if self.sample.count == 0 || self.sample.cell == 0 {
            return bad("sample.count and sample.cell must be positive".into());
        }
        if self.eval.batch == 0 || self.probe.batch_size == 0 || self.bench.repetitions == 0 {
            return bad("eval.batch, probe.batch_size and bench.repetitions must be positive".into());
        }
        if self.probe_steps() == 0 {
            return bad("probe.steps must be positive".into());
        }
        Ok(())
    }

    /// Adopts the architecture stored in a checkpoint. Keys set in a file or
    /// on the command line must agree with it.
    pub fn adopt_model(&mut self, stored: &ModelConfig) -> Result<(), CliError> {
        let theirs = RunConfig {
            model: stored.clone(),
            ..RunConfig::default()
        };
        for key in KEYS.iter().filter(|k| k.starts_with("model.")) {
            let (mine, stored_value) = (self.get(key), theirs.get(key));
            if self.source(key) != Source::Default && mine != stored_value {
                return Err(CliError::Mismatch(format!(
                    "{key} = {} but the checkpoint has {}",
                    mine.unwrap_or_default(),
                    stored_value.unwrap_or_default()
                )));
            }
        }
        self.model = ModelConfig {
            seed: self.model.seed,
            ..stored.clone()
        };
        Ok(())
    }

    /// Same as [`adopt_model`](Self::adopt_model) for the branch depth.
    pub fn adopt_depth(&mut self, depth: usize) -> Result<(), CliError> {
        if self.source("branch.depth") != Source::Default && self.depth() != depth {
            return Err(CliError::Mismatch(format!(
                "branch.depth = {} but the checkpoint branches at {depth}",
                self.depth()
            )));
        }
        self.branch_depth = Some(depth);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("sample.class", "3", Source::Flag).unwrap();
        cfg.set("checkpoint.path", "a/b.ckpt", Source::File).unwrap();
        let mut back = RunConfig::default();
        for (k, v) in parse_text(&cfg.to_text()).unwrap() {
            back.set(&k, &v, Source::File).unwrap();
        }
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.sample.class, Some(3));
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().depth(), 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("model.colour", "1", Source::Flag), Err(CliError::Config(_))));
        assert!(matches!(cfg.set("model.d_model", "wide", Source::Flag), Err(CliError::Config(_))));
        assert!(matches!(parse_text("seed 3"), Err(CliError::Config(_))));
    }
}
