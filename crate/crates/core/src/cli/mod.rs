//! Command-line front end: `dataset | train | generate | eval | oracle`.
//!
//! Every verb reads one JSON [`RunConfig`] (defaults when `--config` is
//! omitted), applies `--set key=value` overrides and writes its results to
//! the output directory. Exit codes: 0 success, 1 usage or configuration
//! error, 2 tolerance failure, 3 I/O error.

pub mod commands;
pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::GenerateMode;
pub use config::RunConfig;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_TOLERANCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nidiff", version, about = "Non-identical diffusion for channel recovery")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dot-path override, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Synthesize the train and test channel sets.
    Dataset,
    /// Train a denoiser.
    Train {
        /// Train the 12-model grid (normalization x scheme x averaging).
        #[arg(long)]
        grid: bool,
    },
    /// Recover test channels from noisy observations.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Identical vs non-identical initialization curves.
        #[arg(long, conflicts_with = "sweep")]
        compare: bool,
        /// Stepping-rule by pattern table.
        #[arg(long)]
        sweep: bool,
    },
    /// Final NMSE table over patterns and steppings, averaged over seeds.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verify the forward law and generation correctness with an exact denoiser.
    Oracle {
        /// Add this constant to every denoiser output.
        #[arg(long, value_name = "BIAS", allow_negative_numbers = true)]
        sabotage: Option<f64>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn resolve(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        overrides.push(format!("out={}", serde_json::to_string(out)?));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let config = match resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = match cli.verb {
        Verb::Dataset => commands::cmd_dataset(&config),
        Verb::Train { grid } => commands::cmd_train(&config, grid),
        Verb::Generate { checkpoint, compare, sweep } => {
            let mode = if compare {
                GenerateMode::Compare
            } else if sweep {
                GenerateMode::Sweep
            } else {
                GenerateMode::Single
            };
            commands::cmd_generate(&config, checkpoint.as_deref(), mode)
        }
        Verb::Eval { checkpoint } => commands::cmd_eval(&config, checkpoint.as_deref()),
        Verb::Oracle { sabotage } => commands::cmd_oracle(&config, sabotage),
    };
    match result {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(failure)) => {
            eprintln!("tolerance failure: {}", failure.0);
            EXIT_TOLERANCE
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
