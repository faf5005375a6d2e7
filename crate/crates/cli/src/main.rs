//! Experiment runner for the policy-optimization laboratory.
//!
//! Five subcommands: `train` runs one policy-gradient experiment,
//! `variance-lab` checks the exact covariance decomposition against Monte
//! Carlo, `probe-eval` scores the value probe on a feature/target CSV
//! pair, `ablate` sweeps probe inputs, and `report` summarizes a run
//! directory. Exit codes are stable: 0 success, 2 config or input error,
//! 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "poise",
    version,
    about = "Desk-scale laboratory for probe-baselined policy optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment from a TOML config.
    Train {
        /// Path to the run configuration.
        config: PathBuf,
        /// Where to write artifacts (beats POISE_OUTPUT_DIR and the config key).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check the gradient-covariance decomposition on an enumerable bandit.
    VarianceLab {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Fit the value probe on feature/target CSVs and score a held-out split.
    ProbeEval {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Feature rows `id,v0,v1,...` (overrides probe_eval.features_path).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Target rows `id,value` (overrides probe_eval.targets_path).
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Probe-quality sweep over feature masks, layers, and pooling windows.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Summarize the artifacts already in a run directory.
    Report {
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, output_dir } => commands::train::run(&config, output_dir),
        Command::VarianceLab { config, output_dir } => {
            commands::variance_lab::run(&config, output_dir)
        }
        Command::ProbeEval {
            config,
            output_dir,
            features,
            targets,
        } => commands::probe_eval::run(&config, output_dir, features, targets),
        Command::Ablate { config, output_dir } => commands::ablate::run(&config, output_dir),
        Command::Report { run_dir } => commands::report::run(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
