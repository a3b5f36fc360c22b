use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saop_cli::config::ExperimentConfig;
use saop_cli::runner::{cmd_multirun, cmd_run, cmd_verify};
use saop_cli::CliError;

/// Sampling-based approximate optimal feedback planning.
#[derive(Parser)]
#[command(name = "saop", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one seeded search run and write its artifacts.
    Run {
        /// Experiment config (JSON).
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Execute independent seeded runs and summarize the final costs.
    Multirun {
        /// Experiment config (JSON).
        #[arg(short, long)]
        config: PathBuf,
        /// Number of runs (overrides the config's `runs`).
        #[arg(long)]
        runs: Option<u32>,
        /// Parallel run slots.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Give every run the same seed (determinism audit).
        #[arg(long)]
        identical_seeds: bool,
    },
    /// Verify a weight vector against the contraction tube and the
    /// disturbance envelope.
    Verify {
        /// Experiment config (JSON).
        #[arg(short, long)]
        config: PathBuf,
        /// Weight vector file: a JSON array, or an object with `w_star`.
        #[arg(short, long)]
        weights: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => cmd_run(&load_config(&config)?),
        Command::Multirun {
            config,
            runs,
            jobs,
            identical_seeds,
        } => {
            let cfg = load_config(&config)?;
            let runs = runs.unwrap_or(cfg.runs);
            cmd_multirun(&cfg, runs, jobs, identical_seeds)
        }
        Command::Verify { config, weights } => cmd_verify(&load_config(&config)?, &weights),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", e.to_json());
            eprintln!("{e}");
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
