//! `pcpo` — train, evaluate and export plot data for the constrained policy
//! optimization lab.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
//! `PCPO_LOG={error|warn|info|debug}` controls log verbosity.

mod eval_cmd;
mod plot_cmd;
mod train_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcpo::train::{Algo, EnvKind};

#[derive(Parser)]
#[command(name = "pcpo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and write metrics, checkpoints and a run manifest.
    Train(TrainArgs),
    /// Roll out a checkpointed policy deterministically (action = mean).
    Eval(EvalArgs),
    /// Merge metrics CSVs from several runs into per-metric summary tables.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file mirroring the training configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics.csv, checkpoints and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Policy checkpoint produced by `train` (ckpt_*_policy.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config of the run that produced the checkpoint (for network widths).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for trajectory dumps; never a training run directory.
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV files from one or more runs (at least one).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for per-metric summary CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EnvArg {
    Lane,
    Intersection,
}

impl From<EnvArg> for EnvKind {
    fn from(v: EnvArg) -> Self {
        match v {
            EnvArg::Lane => EnvKind::Lane,
            EnvArg::Intersection => EnvKind::Intersection,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AlgoArg {
    Pcpo,
    Cpo,
    Ppo,
}

impl From<AlgoArg> for Algo {
    fn from(v: AlgoArg) -> Self {
        match v {
            AlgoArg::Pcpo => Algo::Pcpo,
            AlgoArg::Cpo => Algo::Cpo,
            AlgoArg::Ppo => Algo::Ppo,
        }
    }
}

/// Error carrying its exit class.
pub enum CliError {
    /// Bad usage, unreadable or invalid configuration: exit 2.
    Config(String),
    /// Failure while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<pcpo::Error> for CliError {
    fn from(e: pcpo::Error) -> Self {
        match e {
            pcpo::Error::InvalidConfig(msg) => CliError::Config(msg),
            pcpo::Error::Checkpoint(msg) => CliError::Config(msg),
            other => CliError::Runtime(anyhow::Error::new(other)),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PCPO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train_cmd::run(args),
        Command::Eval(args) => eval_cmd::run(args),
        Command::PlotData(args) => plot_cmd::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
