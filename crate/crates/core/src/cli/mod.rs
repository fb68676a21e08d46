//! Command-line driver: configuration, checkpoint container and the
//! pipeline subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use commands::{Outputs, COMPARISON_HEADER, METRICS_HEADER, ABLATION_HEADER};
pub use config::{Config, ConfigError};

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const BAD_MAGIC: i32 = 5;
    pub const BAD_VERSION: i32 = 6;
    pub const HASH_MISMATCH: i32 = 7;
    pub const TRUNCATED: i32 = 8;
    pub const DATASET_MISMATCH: i32 = 9;
    pub const LOCKED: i32 = 10;
    pub const FAILED: i32 = 11;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset hash mismatch: {0} (pass --force to evaluate anyway)")]
    DatasetMismatch(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Diverged(_) => exit::DIVERGED,
            CliError::Checkpoint(e) => match e {
                CheckpointError::Io { .. } => exit::IO,
                CheckpointError::BadMagic => exit::BAD_MAGIC,
                CheckpointError::UnsupportedVersion(_) => exit::BAD_VERSION,
                CheckpointError::HashMismatch => exit::HASH_MISMATCH,
                CheckpointError::Truncated => exit::TRUNCATED,
                CheckpointError::Format(_) => exit::FAILED,
            },
            CliError::DatasetMismatch(_) => exit::DATASET_MISMATCH,
            CliError::Locked(_) => exit::LOCKED,
            CliError::Failed(_) => exit::FAILED,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cxrl", version, about = "Comparative-feedback RL fine-tuning of a phantom image generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Config file with one key=value per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom train/test corpus.
    PhantomGen(Common),
    /// Pretrain the conditional generator.
    Pretrain(Common),
    /// Fit the posture, classifier and dual-encoder reward models.
    FitRewards(Common),
    /// Fine-tune the generator against the frozen anchor.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Continue from the last state checkpoint if one exists.
        #[arg(long)]
        resume: bool,
        /// Stop (after checkpointing) once this many steps are done.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Generate images for report texts.
    Sample {
        #[command(flatten)]
        common: Common,
        /// `anchor` or `finetuned`.
        #[arg(long, default_value = "finetuned")]
        model: String,
        /// Report text; repeatable. Defaults to the first eight test reports.
        #[arg(long = "report")]
        reports: Vec<String>,
    },
    /// Per-sample rewards of the fine-tuned model against the anchor.
    Score(Common),
    /// Metrics for the anchor and the fine-tuned model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate even if the checkpoints were built from different data.
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune once per reward mask and tabulate the metrics.
    Ablate(Common),
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let load = |c: &Common| Config::load(c.config.as_deref(), &c.overrides);
    match cmd {
        Command::PhantomGen(c) => commands::phantom_gen(&load(&c)?),
        Command::Pretrain(c) => commands::pretrain(&load(&c)?),
        Command::FitRewards(c) => commands::fit_rewards(&load(&c)?),
        Command::Finetune { common, resume, max_steps } => commands::finetune(&load(&common)?, resume, max_steps),
        Command::Sample { common, model, reports } => commands::sample(&load(&common)?, &model, &reports),
        Command::Score(c) => commands::score(&load(&c)?),
        Command::Eval { common, force } => commands::eval(&load(&common)?, force),
        Command::Ablate(c) => commands::ablate(&load(&c)?),
    }
}
