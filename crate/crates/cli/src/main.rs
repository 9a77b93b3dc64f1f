//! `ttsa`: run and check two-timescale stochastic approximation experiments.
//!
//! Exit status: 0 success, 1 validation failure, 2 usage or config error,
//! 3 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ttsa", version, about = "Two-timescale stochastic approximation with set-valued mean fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check schedules, Marchaud conditions and declared attractors.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every seed, writing trace_seed{N}.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (overrides `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run even if the step sizes fail validation.
        #[arg(long)]
        override_schedule_check: bool,
    },
    /// Solve a QP file by KKT enumeration.
    Kkt {
        /// JSON file `{"Q": [[..]], "b": [..], "c": .., "A": [[..]]}`.
        qp: PathBuf,
    },
    /// Tracking and noise diagnostics for existing traces.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        /// Also write diagnostics.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config } => commands::validate(&commands::load_config(&config, None)?),
        Command::Run {
            config,
            out,
            seeds,
            override_schedule_check,
        } => {
            let cfg = commands::load_config(&config, seeds)?;
            let out = out
                .or_else(|| cfg.output.dir.clone())
                .unwrap_or_else(|| PathBuf::from("ttsa-out"));
            commands::run(&cfg, &out, override_schedule_check)
        }
        Command::Kkt { qp } => commands::kkt(&qp),
        Command::Diagnose { config, out, traces } => {
            commands::diagnose(&commands::load_config(&config, None)?, &traces, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ttsa: {e}");
            ExitCode::from(e.code())
        }
    }
}
