use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use consensus_core::cli::{
    load_scenario, run, threads_from_env, write_outputs, CliError, Experiment, RunOptions, Strictness, Topology,
};

#[derive(Parser, Debug)]
#[command(
    name = "consensus-sim",
    version,
    about = "Derivative consensus over delayed multipath digraphs"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Graph structure, channel conditions and step-size bound; no simulation.
    Check(Common),
    /// Simulate and compare the consensus value with theory.
    Simulate(Common),
    /// Simulate and estimate the convergence rate two ways.
    Rate(Common),
    /// Two-run ratio compensation.
    Compensate(Common),
    /// Estimate the normalized left eigenvector from consensus runs.
    EstimateGamma(Common),
    /// Estimate, rescale, compensate and post-map.
    Pipeline(Common),
    /// Redraw the channels for every seed listed in the scenario.
    Batch(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the channel-model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reject unknown scenario fields instead of warning.
    #[arg(long)]
    strict: bool,
    /// Keep every k-th step in the CSV files.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    downsample: u64,
}

fn execute(experiment: Experiment, common: &Common) -> Result<(), CliError> {
    let strictness = if common.strict {
        Strictness::Strict
    } else {
        Strictness::Lenient
    };
    let mut scenario = load_scenario(&common.config, strictness)?;
    if let Some(seed) = common.seed {
        match (&scenario.topology, experiment) {
            (_, Experiment::Batch) => warn!("--seed is ignored for batch runs; the scenario lists the seeds"),
            (Topology::Explicit(_), _) => warn!("--seed has no effect on an explicit topology"),
            _ => scenario.override_seed(seed),
        }
    }
    let options = RunOptions {
        downsample: common.downsample as usize,
        threads: threads_from_env(),
    };
    let output = run(&scenario, experiment, options)?;
    for path in write_outputs(&common.out, &output)? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let (experiment, common) = match &args.command {
        Command::Check(c) => (Experiment::Check, c),
        Command::Simulate(c) => (Experiment::Simulate, c),
        Command::Rate(c) => (Experiment::Rate, c),
        Command::Compensate(c) => (Experiment::Compensate, c),
        Command::EstimateGamma(c) => (Experiment::EstimateGamma, c),
        Command::Pipeline(c) => (Experiment::Pipeline, c),
        Command::Batch(c) => (Experiment::Batch, c),
    };
    match execute(experiment, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error_class": e.class(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
