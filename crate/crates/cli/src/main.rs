use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flashar_cli::commands;
use flashar_cli::config::{parse_assignment, RunConfig};
use flashar_cli::error::CliError;

/// Raster and diagonal-parallel autoregressive generation over synthetic
/// token grids.
///
/// Settings resolve as defaults < `--config` file < flags. Every run
/// directory receives `config.resolved`, which reproduces the run when
/// passed back through `--config`.
///
/// Exit codes: 0 success, 1 other failure, 2 invalid config,
/// 3 missing file, 4 checkpoint/config mismatch.
#[derive(Parser)]
#[command(name = "flashar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines (`#` starts a comment).
    #[arg(long, short = 'c', value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any key; repeatable. Named flags below win over `--set`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (`run.dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Root seed every random stream derives from (`seed`).
    #[arg(long)]
    seed: Option<String>,
    /// Dataset file (`data.path`).
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    /// Input checkpoint (`checkpoint.path`).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pattern dataset into `data.path`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the raster-order backbone.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// `pretrain.steps`.
        #[arg(long)]
        steps: Option<String>,
        /// Continue from a checkpoint written by an earlier run (`checkpoint.resume`).
        #[arg(long, value_name = "FILE")]
        resume: Option<String>,
    },
    /// Build the dual-head model from a raster checkpoint and train it in two stages.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// `adapt.steps`.
        #[arg(long)]
        steps: Option<String>,
        /// Trunk depth where the vertical branch splits off (`branch.depth`).
        #[arg(long)]
        depth: Option<String>,
        /// Continue from a checkpoint written by an earlier run (`checkpoint.resume`).
        #[arg(long, value_name = "FILE")]
        resume: Option<String>,
    },
    /// Fit a linear probe on frozen raster features.
    Probe {
        #[command(flatten)]
        common: Common,
        /// `probe.steps` (`auto`: 5% of `pretrain.steps`).
        #[arg(long)]
        steps: Option<String>,
    },
    /// Decode grids and write tokens, pixmaps and decode traces.
    Sample {
        #[command(flatten)]
        common: Common,
        /// `raster` or `diagonal` (`sample.mode`).
        #[arg(long)]
        mode: Option<String>,
        /// Square grid side; sets `model.height` and `model.width`.
        #[arg(long)]
        size: Option<String>,
        /// Number of grids (`sample.count`).
        #[arg(long)]
        count: Option<String>,
        /// Class of every grid (`sample.class`; `auto` cycles).
        #[arg(long)]
        class: Option<String>,
        /// Use a freshly initialized model (`init.random`).
        #[arg(long)]
        random_init: bool,
    },
    /// Teacher-forced NLL and accuracy on the validation split, optionally
    /// with pattern validity of decoded grids.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Time raster against diagonal decoding.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Raster baseline checkpoint (`checkpoint.base`).
        #[arg(long, value_name = "FILE")]
        base: Option<String>,
        /// Square grid side; sets `model.height` and `model.width`.
        #[arg(long)]
        size: Option<String>,
        /// Use a freshly initialized model (`init.random`).
        #[arg(long)]
        random_init: bool,
    },
}

type Overrides = Vec<(String, String)>;

fn push(out: &mut Overrides, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.clone()));
    }
}

fn common_overrides(c: &Common) -> Result<Overrides, CliError> {
    let mut out = c.set.iter().map(|s| parse_assignment(s)).collect::<Result<Overrides, _>>()?;
    push(&mut out, "run.dir", &c.out);
    push(&mut out, "seed", &c.seed);
    push(&mut out, "data.path", &c.data);
    push(&mut out, "checkpoint.path", &c.checkpoint);
    Ok(out)
}

fn size_overrides(out: &mut Overrides, size: &Option<String>) {
    push(out, "model.height", size);
    push(out, "model.width", size);
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolve = |c: &Common, extra: Overrides| -> Result<RunConfig, CliError> {
        let mut flags = common_overrides(c)?;
        flags.extend(extra);
        RunConfig::resolve(c.config.as_deref(), &flags)
    };
    let random = |on: bool| if on { vec![("init.random".to_string(), "true".to_string())] } else { vec![] };
    match cli.command {
        Command::GenData { common } => commands::gen_data(resolve(&common, vec![])?),
        Command::Pretrain { common, steps, resume } => {
            let mut x = vec![];
            push(&mut x, "pretrain.steps", &steps);
            push(&mut x, "checkpoint.resume", &resume);
            commands::pretrain(resolve(&common, x)?)
        }
        Command::Adapt { common, steps, depth, resume } => {
            let mut x = vec![];
            push(&mut x, "adapt.steps", &steps);
            push(&mut x, "branch.depth", &depth);
            push(&mut x, "checkpoint.resume", &resume);
            commands::adapt_cmd(resolve(&common, x)?)
        }
        Command::Probe { common, steps } => {
            let mut x = vec![];
            push(&mut x, "probe.steps", &steps);
            commands::probe(resolve(&common, x)?)
        }
        Command::Sample { common, mode, size, count, class, random_init } => {
            let mut x = random(random_init);
            push(&mut x, "sample.mode", &mode);
            size_overrides(&mut x, &size);
            push(&mut x, "sample.count", &count);
            push(&mut x, "sample.class", &class);
            commands::sample(resolve(&common, x)?)
        }
        Command::Eval { common } => commands::eval(resolve(&common, vec![])?),
        Command::Bench { common, base, size, random_init } => {
            let mut x = random(random_init);
            push(&mut x, "checkpoint.base", &base);
            size_overrides(&mut x, &size);
            commands::bench_cmd(resolve(&common, x)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flashar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
