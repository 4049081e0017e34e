//! `cfct` — train, evaluate and sweep implicit-feedback recommenders, and
//! verify the engine's negative-selection law, from JSON experiment
//! configs.
//!
//! Exit codes: 0 on success, 1 for internal errors (and a failed
//! verification), 2 for usage and configuration errors.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use cfct_core::losses::LossKind;

use crate::config::{ExperimentConfig, Overrides};

/// Errors surfaced to the user, split by whose fault they are: `Usage`
/// (exit 2) means the invocation or config must change; `Internal`
/// (exit 1) means the engine failed while doing the work.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Internal(String),
}

impl CliError {
    pub fn usage(msg: String) -> Self {
        CliError::Usage(msg)
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<cfct_core::Error> for CliError {
    fn from(e: cfct_core::Error) -> Self {
        use cfct_core::Error as E;
        match e {
            E::Parse { .. }
            | E::EmptyDataset
            | E::InvalidConfig(_)
            | E::EmptyTestSet
            | E::NoPositives
            | E::NotEnoughNegatives { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    LossKind::from_str(s).map_err(|e| e.to_string())
}

/// Flags shared by the config-driven subcommands.
#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config, a single JSON document
    #[arg(long)]
    config: PathBuf,
    /// Override both the training seed and the split seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training objective
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the lock-free parallel training loop
    #[arg(long)]
    parallel: bool,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            loss: self.loss,
            out: self.out.clone(),
            parallel: self.parallel,
        };
        ExperimentConfig::load(&self.config, &overrides)
    }
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Probability of keeping the higher-scored candidate
    #[arg(long)]
    alpha: f64,
    /// Number of synthetic catalog items (at least 2)
    #[arg(long)]
    catalog_size: usize,
    /// Monte-Carlo draws
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for the run
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Parser)]
#[command(
    name = "cfct",
    version,
    about = "Contrastive collaborative-filtering trainer and evaluator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a dataset, then evaluate and persist it
    Train(RunArgs),
    /// Score a saved checkpoint against a dataset split
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint produced by a previous train run
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every point of the configured hyperparameter grid
    Sweep(RunArgs),
    /// Check the negative-selection distribution against its closed form
    VerifyLemma2(VerifyArgs),
    /// Parse and split a dataset, writing its split manifest
    Ingest(RunArgs),
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Train(args) => {
            let dir = commands::cmd_train(&args.load()?)?;
            println!("wrote {}", dir.display());
        }
        Command::Evaluate { run, checkpoint } => {
            let dir = commands::cmd_evaluate(&run.load()?, &checkpoint)?;
            println!("wrote {}", dir.display());
        }
        Command::Sweep(args) => {
            let dir = commands::cmd_sweep(&args.load()?)?;
            println!("wrote {}", dir.display());
        }
        Command::VerifyLemma2(args) => {
            let params = commands::VerifyParams {
                alpha: args.alpha,
                catalog_size: args.catalog_size,
                trials: args.trials,
                seed: args.seed,
                out: args.out,
            };
            let (dir, passed) = commands::cmd_verify_lemma2(&params)?;
            println!("wrote {}", dir.display());
            if !passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ingest(args) => {
            let dir = commands::cmd_ingest(&args.load()?)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
