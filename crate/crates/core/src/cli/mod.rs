//! Scenario-driven front end: load a JSON scenario, run one experiment,
//! write `summary.json`, `trajectory.csv` and `convergence.csv`.

mod run;
mod scenario;

pub use run::{
    convergence_csv, run, threads_from_env, write_outputs, BatchRunSummary, BatchSection, CliError, GammaSection,
    NetworkSection, RateSection, RunOptions, RunOutput, SummaryDocument, Timings, THREADS_ENV,
};
pub use scenario::{
    connected_deployment, load_scenario, parse_scenario, AnalysisSection, Connectivity, Deployment, Experiment,
    Generated, Inputs, ModelSpec, Placement, Positions, Postmap, RandomPositions, Requirement, Scenario, ScenarioError,
    SimSection, Strictness, Topology, DEPLOYMENT_TRIES,
};
