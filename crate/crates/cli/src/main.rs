use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod benchmark;
mod config;
mod fit;
mod fixtures;
mod output;
mod sim;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit 2.
    Input(String),
    /// Failure while fitting or writing: exit 1.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "coral",
    version,
    about = "Multi-model fitting by convex relaxation: simulated sweeps, homography and plane segmentation, benchmarks",
    after_help = "Exit codes: 0 success, 2 invalid flags, config or input, 1 failure while fitting or writing.\n\
                  Flags win over --config, which wins over the per-command defaults shown in each help."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulated two-view sweeps over pixel noise and outlier ratio; writes sweep.csv and summary.json
    Sim(sim::SimArgs),
    /// Segment a correspondence CSV into homographies; writes labels.json, models.json, energy_trace.csv, summary.json
    FitHomography(fit::HomographyArgs),
    /// Segment an RGB-D frame into planes; writes labels.pgm, models.json, energy_trace.csv, summary.json
    FitPlanes(fit::PlaneArgs),
    /// Mean and median ME over a manifest of cases; writes summary.json
    Benchmark(benchmark::BenchmarkArgs),
    /// Write synthetic inputs for every subcommand
    GenFixtures(fixtures::FixtureArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(a) => sim::run(a),
        Command::FitHomography(a) => fit::run_homography(a),
        Command::FitPlanes(a) => fit::run_planes(a),
        Command::Benchmark(a) => benchmark::run(a),
        Command::GenFixtures(a) => fixtures::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
