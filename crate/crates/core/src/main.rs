//! Command-line front end: train a structured gain, replay scenarios,
//! evaluate costs, sweep parameter perturbations, or estimate noise moments,
//! all driven by one JSON config file.

use clap::{Parser, Subcommand};
use p2p_lfc::harness::{run_experiment, CommandKind, Invocation};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "p2p-lfc", version, about = "Risk-constrained load frequency control")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a gain; writes train_log.csv, K_final.json, and snapshots.
    Train,
    /// Run the configured scenario with a gain; writes trajectory.csv.
    Simulate {
        /// Gain JSON (defaults to the zero gain).
        #[arg(long)]
        gain: Option<PathBuf>,
    },
    /// Exact and sampled cost/risk of a gain; writes eval_cost.json.
    EvalCost {
        #[arg(long)]
        gain: Option<PathBuf>,
    },
    /// Parameter-perturbation sweep; writes robustness.json.
    Robustness {
        #[arg(long)]
        gain: Option<PathBuf>,
    },
    /// Estimate noise moments from a load trace; writes noise_stats.json.
    Stats {
        /// Trace CSV with header area_1,...,area_N.
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("error: --config <PATH> is required");
        return ExitCode::FAILURE;
    };
    let kind = match cli.command {
        Command::Train => CommandKind::Train,
        Command::Simulate { gain } => CommandKind::Simulate { gain },
        Command::EvalCost { gain } => CommandKind::EvalCost { gain },
        Command::Robustness { gain } => CommandKind::Robustness { gain },
        Command::Stats { trace } => CommandKind::Stats { trace },
    };
    let inv = Invocation { config, seed: cli.seed, out: cli.out, kind };
    match run_experiment(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
