//! Command-line driver for the meta-learned adaptive MPC experiments.
//! Exit codes: 0 success, 1 error, 2 acceptance-check failure in `--check`
//! mode.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metampc::harness::{check_experiment, run_experiment, Config};

#[derive(Parser)]
#[command(name = "metampc", version, about = "Meta-learned adaptive MPC experiments")]
struct Cli {
    /// Flat key-value config file (dotted keys, `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root random seed; all experiment randomness derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for CSV/JSON artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// After the run, apply the experiment's acceptance checks to its
    /// outputs; failure exits with code 2.
    #[arg(long, global = true, default_value_t = false)]
    check: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect per-task datasets with a ground-truth-model controller.
    Collect,
    /// Optimize basis hyperparameters across the collected tasks.
    MetaTrain,
    /// Evaluate the negative ELBO over a 1-D hyperparameter grid.
    ElboScan,
    /// Adapt along held-out trajectories and score fit quality.
    MetaTest,
    /// Race the adaptive controller against reference and baseline.
    Race,
    /// Adaptive run with a grip reduction in the second track half.
    GripChange,
    /// Cumulative position RMSE between two trajectory CSVs.
    Rmse,
}

impl Command {
    fn experiment_name(&self) -> &'static str {
        match self {
            Command::Collect => "collect",
            Command::MetaTrain => "meta-train",
            Command::ElboScan => "elbo-scan",
            Command::MetaTest => "meta-test",
            Command::Race => "race",
            Command::GripChange => "grip-change",
            Command::Rmse => "rmse",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => Config::default(),
    };
    let name = cli.command.experiment_name();
    match run_experiment(name, &cfg, cli.seed, &cli.out) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    if cli.check {
        match check_experiment(name, &cli.out) {
            Ok((true, msg)) => println!("check passed: {msg}"),
            Ok((false, msg)) => {
                eprintln!("check failed: {msg}");
                return ExitCode::from(2);
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::SUCCESS
}
