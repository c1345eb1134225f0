//! `crve`: cluster-robust variance estimation, size studies and cluster
//! resampling from the command line.
//!
//! Exit status is 0 when at least one method produced a result, 2 on input
//! or configuration errors and 3 when every requested method failed.

// `!(x > 0.0)` is used on purpose so NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod data;
mod estimate;
mod manifest;
mod panel;
mod report;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "crve",
    version,
    about = "Cluster-robust variance estimation with unbiased estimators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Variance estimates and t-tests for a clustered CSV data set.
    Estimate(estimate::EstimateArgs),
    /// Run a Monte Carlo size study from a TOML config.
    Simulate(simulate::SimulateArgs),
    /// Write one synthetic data set drawn from a study config.
    Generate(simulate::GenerateArgs),
    /// Placebo-policy size check by resampling clusters of a CSV data set.
    Resample(simulate::ResampleArgs),
    /// Unbiased and plug-in variance for a balanced panel.
    Panel(panel::PanelArgs),
}

/// How a command ended when it did not hit an input error.
pub enum Status {
    Success,
    AllMethodsFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => estimate::run(a),
        Command::Simulate(a) => simulate::run_simulate(a),
        Command::Generate(a) => simulate::run_generate(a),
        Command::Resample(a) => simulate::run_resample(a),
        Command::Panel(a) => panel::run(a),
    };
    match result {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::AllMethodsFailed) => {
            eprintln!("error: every requested method failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
