//! Subcommand bodies. Each one resolves its inputs, echoes the final config
//! into the run directory and writes its artifacts there.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flashar_core::checkpoint::Checkpoint;
use flashar_core::data::{default_specs, generate_dataset, Dataset, Sample, Split};
use flashar_core::decode::{bench, decode_diagonal, decode_raster, BenchConfig, Decoded, SamplerConfig};
use flashar_core::eval::{default_palette, eval_nll, pattern_validity, render_grid, EvalModel};
use flashar_core::grid::{MaskKind, TokenGrid};
use flashar_core::model::{Backbone, Condition, DualHeadModel};
use flashar_core::probe::{linear_probe, ProbeConfig};
use flashar_core::rng;
use flashar_core::train::{adapt, pretrain_raster, resume_adapt, resume_pretrain, MetricRecord, Observer};
use serde_json::json;

use crate::config::{DecodeMode, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Layout: `config.resolved`, `metrics.log`, `checkpoints/`, `samples/`,
/// `reports/`.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.run_dir.clone();
        for sub in ["checkpoints", "samples", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| CliError::from_io(&p, e))?;
        }
        let dir = Self { root };
        dir.write("config.resolved", cfg.to_text().as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(|e| CliError::from_io(&p, e))
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path)?;
    Ok(Checkpoint::load(path)?)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.checkpoint
        .path
        .clone()
        .ok_or_else(|| CliError::Config("checkpoint.path is not set (use --checkpoint)".into()))
}

/// Loads `checkpoint.path` and adopts its architecture.
fn input_checkpoint(cfg: &mut RunConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(&checkpoint_path(cfg)?)?;
    cfg.adopt_model(&ck.model_config)?;
    if let Some(b) = ck.branch {
        cfg.adopt_depth(b.depth)?;
    }
    Ok(ck)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    require(&cfg.data.path)?;
    let data = Dataset::read(&cfg.data.path)?;
    let (h, m) = (&data.header, &cfg.model);
    if (h.height, h.width, h.vocab, h.classes) != (m.height, m.width, m.vocab_size, m.num_classes) {
        return Err(CliError::Mismatch(format!(
            "dataset {} is {}x{} with V={} and {} classes; model is {}x{} with V={} and {} classes",
            cfg.data.path.display(),
            h.height,
            h.width,
            h.vocab,
            h.classes,
            m.height,
            m.width,
            m.vocab_size,
            m.num_classes
        )));
    }
    Ok(data)
}

pub fn gen_data(cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let m = cfg.model.clone();
    let specs = default_specs(m.num_classes, m.height, m.width, m.vocab_size, cfg.data.noise, cfg.seed)?;
    let data = generate_dataset(&specs, &vec![cfg.data.per_class; m.num_classes], cfg.seed)?;
    if let Some(parent) = cfg.data.path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::from_io(parent, e))?;
    }
    let dir = RunDir::create(&cfg)?;
    data.write(&cfg.data.path)?;
    let (train, val) = (data.split(Split::Train).len(), data.split(Split::Val).len());
    let mut report = format!(
        "dataset {}\nsamples {} (train {train}, val {val})\ngrid {}x{} vocab {} classes {} noise {}\n",
        cfg.data.path.display(),
        data.samples.len(),
        m.height,
        m.width,
        m.vocab_size,
        m.num_classes,
        cfg.data.noise
    );
    for s in &specs {
        report.push_str(&format!("class {}: {:?}\n", s.class, s.family));
    }
    dir.write("reports/gen-data.txt", report.as_bytes())?;
    print!("{report}");
    Ok(())
}

/// Streams metric records into `metrics.log` and checkpoints into
/// `checkpoints/`.
struct RunObserver {
    log: File,
    checkpoints: PathBuf,
    boundary: Option<(usize, usize)>,
    last_eval: Option<f64>,
}

impl RunObserver {
    /// Keeps log lines from before `resume_step`, so a resumed run ends with
    /// the same log as an uninterrupted one.
    fn new(dir: &RunDir, resume_step: usize, boundary: Option<(usize, usize)>) -> Result<Self> {
        let log_path = dir.path("metrics.log");
        let mut kept = Vec::new();
        if resume_step > 0 {
            if let Ok(f) = File::open(&log_path) {
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(|e| CliError::from_io(&log_path, e))?;
                    let step = serde_json::from_str::<serde_json::Value>(&line)
                        .ok()
                        .and_then(|v| v["step"].as_u64());
                    if step.is_some_and(|s| (s as usize) < resume_step) {
                        kept.push(line);
                    }
                }
            }
        }
        let mut log = File::create(&log_path).map_err(|e| CliError::from_io(&log_path, e))?;
        for line in kept {
            writeln!(log, "{line}").map_err(|e| CliError::from_io(&log_path, e))?;
        }
        Ok(Self {
            log,
            checkpoints: dir.path("checkpoints"),
            boundary,
            last_eval: None,
        })
    }

    fn line(&mut self, text: &str) -> flashar_core::Result<()> {
        writeln!(self.log, "{text}")?;
        Ok(())
    }
}

impl Observer for RunObserver {
    fn on_metrics(&mut self, r: &MetricRecord) -> flashar_core::Result<()> {
        if let Some((b, total)) = self.boundary {
            if r.step == b {
                let event = json!({"event": "stage_boundary", "step": b, "total_steps": total});
                self.line(&event.to_string())?;
                eprintln!("stage boundary at step {b} of {total}");
            }
        }
        self.line(&r.to_json_line())?;
        if let Some(nll) = r.eval_nll {
            self.last_eval = Some(nll);
            eprintln!("step {:>6}  loss {:.4}  eval nll {:.4}", r.step, r.total, nll);
        } else if r.step.is_multiple_of(10) {
            eprintln!("step {:>6}  loss {:.4}", r.step, r.total);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ck: &Checkpoint) -> flashar_core::Result<()> {
        ck.save(&self.checkpoints.join(format!("step-{:06}.ckpt", ck.step)))
    }
}

fn timing_report(dir: &RunDir, name: &str, steps: usize, start: Instant, extra: &str) -> Result<()> {
    let secs = start.elapsed().as_secs_f64();
    let text = format!("steps {steps}\nwall seconds {secs:.3}\nseconds per step {:.4}\n{extra}", secs / steps.max(1) as f64);
    dir.write(&format!("reports/{name}.txt"), text.as_bytes())
}

pub fn pretrain(mut cfg: RunConfig) -> Result<()> {
    let resume = match &cfg.checkpoint.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.is_dual() {
                return Err(CliError::Mismatch("pretraining resumes from a raster checkpoint".into()));
            }
            cfg.adopt_model(&ck.model_config)?;
            Some(ck)
        }
        None => None,
    };
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let sched = cfg.pretrain_schedule();
    let start_step = resume.as_ref().map_or(0, |c| c.step as usize);
    let mut obs = RunObserver::new(&dir, start_step, None)?;
    let start = Instant::now();
    let ck = match &resume {
        Some(ck) => resume_pretrain(ck, &data, &sched, &mut obs)?,
        None => pretrain_raster(&cfg.model_config(), &data, &sched, &mut obs)?,
    };
    ck.save(&dir.path("checkpoints/final.ckpt"))?;
    let extra = format!("final eval nll {}\n", obs.last_eval.map_or("n/a".into(), |v| format!("{v:.6}")));
    timing_report(&dir, "pretrain", sched.total_steps - start_step, start, &extra)?;
    println!("wrote {}", dir.path("checkpoints/final.ckpt").display());
    Ok(())
}

pub fn adapt_cmd(mut cfg: RunConfig) -> Result<()> {
    let (ck, resumed) = match cfg.checkpoint.resume.clone() {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            let branch = ck
                .branch
                .ok_or_else(|| CliError::Mismatch("adaptation resumes from a dual-head checkpoint".into()))?;
            cfg.adopt_model(&ck.model_config)?;
            cfg.adopt_depth(branch.depth)?;
            (ck, true)
        }
        None => {
            let ck = input_checkpoint(&mut cfg)?;
            if ck.is_dual() {
                return Err(CliError::Mismatch("adaptation starts from a raster checkpoint".into()));
            }
            (ck, false)
        }
    };
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let sched = cfg.adapt_schedule();
    let start_step = if resumed { ck.step as usize } else { 0 };
    let mut obs = RunObserver::new(&dir, start_step, Some((sched.stage_boundary(), sched.total_steps)))?;
    let start = Instant::now();
    let out = if resumed {
        resume_adapt(&ck, &data, &sched, &cfg.loss, &mut obs)?
    } else {
        adapt(&ck, cfg.depth(), &data, &sched, &cfg.loss, &mut obs)?
    };
    out.save(&dir.path("checkpoints/final.ckpt"))?;
    let extra = format!(
        "branch depth {}\nstage boundary {}\nfinal eval nll {}\n",
        cfg.depth(),
        sched.stage_boundary(),
        obs.last_eval.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    timing_report(&dir, "adapt", sched.total_steps - start_step, start, &extra)?;
    println!("wrote {}", dir.path("checkpoints/final.ckpt").display());
    Ok(())
}

pub fn probe(mut cfg: RunConfig) -> Result<()> {
    let ck = input_checkpoint(&mut cfg)?;
    if ck.is_dual() {
        return Err(CliError::Mismatch("the probe reads a raster checkpoint".into()));
    }
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let pc = ProbeConfig {
        steps: cfg.probe_steps(),
        batch_size: cfg.probe.batch_size,
        lr: cfg.probe.lr,
        seed: cfg.seed,
        eval_samples: cfg.probe.eval_samples,
        per_layer: cfg.probe.per_layer,
    };
    let result = linear_probe(&ck, &data, &pc)?;
    let text = result.to_text();
    dir.write("reports/probe.txt", text.as_bytes())?;
    dir.write("reports/probe.json", to_json(&result).as_bytes())?;
    print!("{text}");
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

/// The models a decoding command works with.
#[allow(clippy::large_enum_variant)]
enum Models {
    Raster(Backbone<f32>),
    Dual(DualHeadModel<f32>),
}

fn decoding_models(cfg: &mut RunConfig) -> Result<Models> {
    if cfg.random_init {
        if cfg.checkpoint.path.is_some() {
            return Err(CliError::Config("init.random conflicts with checkpoint.path".into()));
        }
        cfg.validate()?;
        let base = Backbone::init(cfg.model_config())?;
        return Ok(Models::Dual(DualHeadModel::build_from_pretrained(&base, cfg.depth())?));
    }
    let ck = input_checkpoint(cfg)?;
    cfg.validate()?;
    Ok(if ck.is_dual() {
        Models::Dual(ck.to_dual()?)
    } else {
        Models::Raster(ck.to_raster()?)
    })
}

/// Sampler seed of the `i`-th grid of a command.
fn grid_seed(seed: u64, command: &str, i: usize) -> u64 {
    rng::stream_seed(seed, &format!("{command}.{i}"))
}

fn decode_one(models: &Models, mode: DecodeMode, class: usize, sampler: &SamplerConfig, cfg: &RunConfig) -> Result<Decoded<f32>> {
    let cond = Condition::Class(class);
    Ok(match (models, mode) {
        (Models::Dual(d), DecodeMode::Diagonal) => decode_diagonal(d, cond, sampler, &cfg.cfg)?,
        (Models::Dual(d), DecodeMode::Raster) => decode_raster(&d.horizontal_backbone(), cond, sampler, &cfg.cfg)?,
        (Models::Raster(r), DecodeMode::Raster) => decode_raster(r, cond, sampler, &cfg.cfg)?,
        (Models::Raster(_), DecodeMode::Diagonal) => {
            return Err(CliError::Mismatch("diagonal decoding needs a dual-head checkpoint".into()))
        }
    })
}

fn grid_text(grid: &TokenGrid, class: usize) -> String {
    let mut s = format!("class {class}\n");
    for row in grid.tokens().chunks(grid.width()) {
        let cells: Vec<String> = row.iter().map(|t| t.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

pub fn sample(mut cfg: RunConfig) -> Result<()> {
    let models = decoding_models(&mut cfg)?;
    let dir = RunDir::create(&cfg)?;
    let mode = cfg.sample.mode;
    let palette = default_palette(cfg.model.vocab_size);
    let mut timing = String::new();
    for i in 0..cfg.sample.count {
        let class = cfg.sample.class.unwrap_or(i % cfg.model.num_classes);
        let sampler = SamplerConfig {
            seed: grid_seed(cfg.seed, "sample", i),
            ..cfg.sampler
        };
        let out = decode_one(&models, mode, class, &sampler, &cfg)?;
        let stem = format!("samples/{}-{i:04}", mode_name(mode));
        let t = &out.trace;
        let trace = json!({
            "mode": mode_name(mode), "class": class, "seed": sampler.seed,
            "steps": t.steps, "invocations": t.invocations, "widths": t.widths, "tokens": t.tokens,
        });
        dir.write(&format!("{stem}.txt"), grid_text(&out.grid, class).as_bytes())?;
        dir.write(&format!("{stem}.ppm"), &render_grid(&out.grid, &palette, cfg.sample.cell)?)?;
        dir.write(&format!("{stem}.trace.json"), (trace.to_string() + "\n").as_bytes())?;
        let step_ms: Vec<f64> = t.step_times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let rec = json!({"index": i, "total_ms": t.total_time.as_secs_f64() * 1e3, "step_ms": step_ms});
        timing.push_str(&(rec.to_string() + "\n"));
        println!("{stem}: class {class}, {} steps, {} invocations", t.steps, t.invocations);
    }
    dir.write("reports/sample-timing.jsonl", timing.as_bytes())
}

fn mode_name(mode: DecodeMode) -> &'static str {
    match mode {
        DecodeMode::Raster => "raster",
        DecodeMode::Diagonal => "diagonal",
    }
}

pub fn eval(mut cfg: RunConfig) -> Result<()> {
    let ck = input_checkpoint(&mut cfg)?;
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let mut val: Vec<&Sample> = data.split(Split::Val);
    if cfg.eval.samples > 0 {
        val.truncate(cfg.eval.samples);
    }
    let models = if ck.is_dual() {
        Models::Dual(ck.to_dual()?)
    } else {
        Models::Raster(ck.to_raster()?)
    };
    let (mut report, mode) = match &models {
        Models::Dual(d) => (eval_nll(EvalModel::Dual(d), &val, MaskKind::DiagonalCausal, cfg.eval.batch)?, DecodeMode::Diagonal),
        Models::Raster(r) => (eval_nll(EvalModel::Raster(r), &val, MaskKind::RasterCausal, cfg.eval.batch)?, DecodeMode::Raster),
    };
    if cfg.eval.validity_samples > 0 {
        let mut grids = Vec::new();
        let mut classes = Vec::new();
        for i in 0..cfg.eval.validity_samples {
            let class = i % cfg.model.num_classes;
            let sampler = SamplerConfig {
                seed: grid_seed(cfg.seed, "eval", i),
                ..cfg.sampler
            };
            grids.push(decode_one(&models, mode, class, &sampler, &cfg)?.grid);
            classes.push(class);
        }
        report.validity = Some(pattern_validity(&grids, &classes, &data.specs()?)?);
    }
    let mut text = format!(
        "model {}\nsamples {}\ntokens {}\nnll {:.6}\naccuracy {:.6}\n",
        mode_name(mode),
        val.len(),
        report.tokens,
        report.nll,
        report.accuracy
    );
    if let Some(v) = &report.validity {
        text.push_str(&format!("mean validity {:.6}\nvalid fraction {:.6}\n", v.mean_validity, v.valid_fraction));
    }
    dir.write("reports/eval.txt", text.as_bytes())?;
    dir.write("reports/eval.json", to_json(&report).as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn bench_cmd(mut cfg: RunConfig) -> Result<()> {
    let dual = match decoding_models(&mut cfg)? {
        Models::Dual(d) => d,
        Models::Raster(_) => return Err(CliError::Mismatch("bench needs a dual-head checkpoint".into())),
    };
    let raster = match cfg.checkpoint.base.clone() {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            if ck.is_dual() {
                return Err(CliError::Mismatch("checkpoint.base must be a raster checkpoint".into()));
            }
            ck.to_raster()?
        }
        None => dual.horizontal_backbone(),
    };
    let dir = RunDir::create(&cfg)?;
    let bc = BenchConfig {
        repetitions: cfg.bench.repetitions,
        warmups: cfg.bench.warmups,
        sampler: SamplerConfig {
            seed: grid_seed(cfg.seed, "bench", 0),
            ..cfg.sampler
        },
        cfg: cfg.cfg,
    };
    let report = bench(&raster, &dual, Condition::Class(cfg.bench.class), &bc)?;
    let text = report.to_text();
    dir.write("reports/bench.txt", text.as_bytes())?;
    dir.write("reports/bench.jsonl", report.to_jsonl().as_bytes())?;
    print!("{text}");
    Ok(())
}
