use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aft::commands::{FitCmd, PredictCmd, SimulateCmd};

/// Semiparametric AFT models for partly interval-censored survival data.
#[derive(Debug, Parser)]
#[command(name = "aft", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model and write `fit.json` plus a baseline-hazard table.
    Fit(FitCmd),
    /// Generate a synthetic dataset, or replicate fits into a Monte Carlo
    /// report with `--reps`.
    Simulate(SimulateCmd),
    /// Evaluate survival curves and survival ratios from a saved fit.
    Predict(PredictCmd),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(cmd) => cmd.run(),
        Command::Simulate(cmd) => cmd.run(),
        Command::Predict(cmd) => cmd.run(),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
