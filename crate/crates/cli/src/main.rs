//! `ldg`: train, evaluate and analyze temporal link prediction models on
//! event streams.

mod commands;
mod exit;
mod plot;
mod runconfig;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::runconfig::{Command, RunConfig};

#[derive(Parser)]
#[command(name = "ldg", version, about = "Latent dynamic graph models for temporal event streams")]
#[command(after_help = "Exit codes: 0 ok, 1 other failure, 2 missing input file, 3 configuration error, 4 divergence.")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Fit a model; writes checkpoints, metrics.csv and loss.svg.
    Train(TrainArgs),
    /// Rank test events with a trained run; writes results.csv.
    Evaluate(EvaluateArgs),
    /// Compare learned attention with association graphs; writes auc.csv.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic event stream with a planted graph.
    Synth(SynthArgs),
    /// Rank test events without a learned model; writes results.csv.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for the run directory.
    #[arg(long)]
    out: Option<String>,
    /// Any other configuration key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    events: Option<String>,
    #[arg(long)]
    assoc: Option<String>,
    /// Events at or after this time are held out.
    #[arg(long)]
    train_until: Option<String>,
    #[arg(long, value_name = "dyrep|ldg-learned|ldg-random")]
    attention: Option<String>,
    #[arg(long, value_name = "uniform|sparse")]
    prior: Option<String>,
    #[arg(long, value_name = "concat|bilinear")]
    interaction: Option<String>,
    #[arg(long, value_name = "R")]
    edge_types: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long, value_name = "P")]
    batch: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    min_prob: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of a finished training run.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    events: Option<String>,
    #[arg(long, value_name = "ALPHA")]
    blend_freq: Option<String>,
    #[arg(long)]
    min_prob: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Also write every candidate score to scores.csv.
    #[arg(long)]
    dump_scores: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    assoc: Option<String>,
    /// Ground-truth graph from `synth`.
    #[arg(long)]
    planted: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    nodes: Option<String>,
    /// Expected number of communication events.
    #[arg(long)]
    events: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    events: Option<String>,
    #[arg(long)]
    assoc: Option<String>,
    #[arg(long)]
    train_until: Option<String>,
    #[arg(long, value_name = "no-learn|frequency")]
    variant: Option<String>,
    #[arg(long)]
    min_prob: Option<String>,
}

/// Collects `(key, value)` overrides from named optional flags.
macro_rules! overrides {
    ($args:expr; $($field:ident),*) => {{
        let mut v: Vec<(String, String)> = Vec::new();
        $(if let Some(x) = &$args.$field {
            v.push((stringify!($field).to_string(), x.clone()));
        })*
        v
    }};
}

fn config(command: Command, common: Common, mut flags: Vec<(String, String)>) -> anyhow::Result<RunConfig> {
    if let Some(out) = common.out {
        flags.push(("out".into(), out));
    }
    for kv in common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            exit::CliError::new(exit::ExitKind::Config, format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        flags.push((k.trim().into(), v.trim().into()));
    }
    RunConfig::load(command, common.config.as_deref(), flags)
}

fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    match cli.command {
        Sub::Train(a) => {
            let o = overrides!(a; events, assoc, train_until, attention, prior, interaction, edge_types, epochs, lr, batch, seed, min_prob);
            commands::cmd_train(config(Command::Train, a.common, o)?)
        }
        Sub::Evaluate(a) => {
            let mut o = overrides!(a; checkpoint, events, blend_freq, min_prob, seed);
            if a.dump_scores {
                o.push(("dump_scores".into(), "true".into()));
            }
            commands::cmd_evaluate(config(Command::Evaluate, a.common, o)?)
        }
        Sub::Analyze(a) => {
            let o = overrides!(a; checkpoint, assoc, planted);
            commands::cmd_analyze(config(Command::Analyze, a.common, o)?)
        }
        Sub::Synth(a) => {
            let o = overrides!(a; nodes, events, seed);
            commands::cmd_synth(config(Command::Synth, a.common, o)?)
        }
        Sub::Baseline(a) => {
            let o = overrides!(a; events, assoc, train_until, variant, min_prob);
            commands::cmd_baseline(config(Command::Baseline, a.common, o)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(exit::ExitKind::Config.code()) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::exit_code(&e))
        }
    }
}
