//! `facdiff`: train, race, sweep, diagnose and certify from one config file.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<facdiff::Error> for CliError {
    fn from(e: facdiff::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "facdiff",
    version,
    about = "Factored diffusion-policy composition and trajectory-tube certificates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; the shipped defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially, 0 uses every core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate the config and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train the model roster on the held-in tasks.
    Train,
    /// Tube certificates for the given tasks (the held-out ones by default).
    Certify {
        /// Task name such as race3_standard; repeatable.
        #[arg(long)]
        task: Vec<String>,
    },
    /// Fly every model on the task matrix.
    Race,
    /// DDIM-step or seed sweep of passage and sensitivity constants.
    Sweep,
    /// Residual-gap decomposition per task.
    Diagnose,
    /// Fit the closed-loop contraction constants on the vehicle stack.
    EstimateContraction,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("facdiff: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
