//! Experiment execution and artifact emission.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use super::scenario::{Deployment, Experiment, Scenario, ScenarioError};
use crate::analysis::{
    consensus_report, rate_empirical, rate_spectral, sufficient_spectral_check, AnalysisError, CompanionSpectrum,
    ConsensusReport, SpectralBoundReport, SpectralOptions,
};
use crate::channel::{check_conditions, ChannelError, ConditionReport, NetworkModel, OmegaGrid};
use crate::digraph::{build_digraph, laplacian, scc_decompose, GraphError, SccDecomposition};
use crate::protocol::{
    compensate, estimate_gamma, unbiased_pipeline, CompensationResult, GammaEstimate, PipelineResult, ProtocolError,
};
use crate::simulator::{
    check_step_stability, quantize_delays, run_batch, simulate, BatchSpec, BatchStats, QuantizationReport, SimError,
    StabilityBound, Trajectory,
};

/// Environment variable capping the worker count of batch runs.
pub const THREADS_ENV: &str = "CONSENSUS_SIM_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(ScenarioError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("network: {0}")]
    Network(String),
    #[error("simulation: {0}")]
    Simulation(#[from] SimError),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Channel(c) => CliError::Network(c.to_string()),
            ScenarioError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Config(other),
        }
    }
}

impl From<ChannelError> for CliError {
    fn from(e: ChannelError) -> Self {
        CliError::Network(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Network(e.to_string())
    }
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Network(_) => "network",
            CliError::Simulation(_) => "simulation",
            CliError::Analysis(_) => "analysis",
            CliError::Protocol(_) => "protocol",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Network(_) => 4,
            CliError::Simulation(_) => 5,
            CliError::Analysis(_) => 6,
            CliError::Protocol(_) => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkSection {
    pub nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deployment: Option<Deployment>,
    /// Channels as generated, before delay rounding.
    pub channels: NetworkModel,
    pub quantization: QuantizationReport,
    pub qsc: bool,
    pub sc: bool,
    pub scc: SccDecomposition,
    /// Left null vector of the Laplacian (unit sum); absent when not QSC.
    pub gamma: Option<Vec<f64>>,
    pub gamma_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSection {
    pub empirical: Option<f64>,
    pub empirical_error: Option<String>,
    pub spectrum: Option<CompanionSpectrum>,
    pub spectrum_error: Option<String>,
    /// `|empirical - spectral| / spectral` when both are available.
    pub relative_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSection {
    #[serde(flatten)]
    pub estimate: GammaEstimate,
    /// `‖γ̃ - γ/Σγ‖_∞` against the Laplacian null vector.
    pub oracle_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRunSummary {
    pub seed: u64,
    pub error: Option<String>,
    pub report: Option<ConsensusReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSection {
    pub stats: BatchStats,
    pub runs: Vec<BatchRunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub phases: BTreeMap<String, f64>,
}

/// Everything a run reports. Only `timings` varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryDocument {
    pub experiment: Experiment,
    pub scenario: Scenario,
    pub network: NetworkSection,
    pub conditions: ConditionReport,
    pub spectral_bound: Option<SpectralBoundReport>,
    pub spectral_bound_error: Option<String>,
    pub stability: StabilityBound,
    pub consensus: Option<ConsensusReport>,
    pub rate: Option<RateSection>,
    pub compensation: Option<CompensationResult>,
    pub gamma_estimate: Option<GammaSection>,
    pub pipeline: Option<PipelineResult>,
    pub batch: Option<BatchSection>,
    pub timings: Timings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every k-th step in the CSV files.
    pub downsample: usize,
    pub threads: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            downsample: 1,
            threads: None,
        }
    }
}

/// Artifacts of one run, held in memory until written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: SummaryDocument,
    pub trajectory_csv: Option<Vec<u8>>,
    pub convergence_csv: Option<Vec<u8>>,
}

struct Clock {
    start: Instant,
    phases: BTreeMap<String, f64>,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            phases: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        *self.phases.entry(name.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }

    fn finish(self) -> Timings {
        Timings {
            total_seconds: self.start.elapsed().as_secs_f64(),
            phases: self.phases,
        }
    }
}

/// `step,time,spread,max_residual`; the residual is measured against the
/// closed-form consensus value when there is one and against each node's
/// own limit otherwise.
pub fn convergence_csv(trajectory: &Trajectory, targets: &[f64], downsample: usize) -> Vec<u8> {
    use std::fmt::Write;
    let mut s = String::from("step,time,spread,max_residual\n");
    let step = downsample.max(1);
    for k in (0..trajectory.horizon()).step_by(step) {
        let residual = trajectory
            .derivs_at(k)
            .iter()
            .zip(targets)
            .map(|(d, a)| (d - a).abs())
            .fold(0.0, f64::max);
        writeln!(s, "{},{},{},{}", k, trajectory.time(k), trajectory.spread(k), residual).expect("string write");
    }
    s.into_bytes()
}

fn trajectory_bytes(trajectory: &Trajectory, downsample: usize, ratio: Option<&[f64]>) -> Vec<u8> {
    let mut buf = Vec::new();
    trajectory
        .write_csv(&mut buf, downsample, ratio)
        .expect("writing to memory cannot fail");
    buf
}

fn targets(report: &ConsensusReport, nodes: usize) -> Vec<f64> {
    match report.alpha_theory {
        Some(a) => vec![a; nodes],
        None => report.per_node_empirical.clone(),
    }
}

/// Executes `experiment` on `scenario`. Nothing is written to disk.
pub fn run(scenario: &Scenario, experiment: Experiment, options: RunOptions) -> Result<RunOutput, CliError> {
    if let Some(declared) = scenario.experiment {
        if declared != experiment {
            return Err(CliError::Config(ScenarioError::Invalid {
                field: "experiment".into(),
                message: format!("scenario declares `{declared}` but `{experiment}` was requested"),
            }));
        }
    }
    let mut echo = scenario.clone();
    echo.experiment = Some(experiment);

    let mut clock = Clock::new();
    let config = scenario.sim_config();
    let t = config.sample_time;

    let deployment = clock.time("network", || scenario.deployment())?;
    let network = clock.time("network", || scenario.build_network())?;
    config.validate_structure(network.nodes())?;
    let (quantized, quantization) = quantize_delays(&network, t);
    info!(
        "{} nodes, {} channels, max lag {} samples",
        network.nodes(),
        network.channels().len(),
        quantization.max_lag
    );

    let g = build_digraph(&quantized);
    let scc = scc_decompose(&g);
    let qsc = scc.root_component.is_some();
    let bundle = if qsc { Some(laplacian(&g)?) } else { None };
    let conditions = clock.time("conditions", || {
        check_conditions(&network, PI / t, scenario.analysis.omega_steps)
    })?;
    let grid = OmegaGrid::nyquist(t, scenario.analysis.omega_steps)?;
    let (spectral_bound, spectral_bound_error) = match sufficient_spectral_check(&network, grid) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if !conditions.all_dc_positive || !conditions.all_rowsum_hold {
        warn!("sufficient frequency-domain condition not met; convergence is not guaranteed");
    }
    let stability = check_step_stability(&quantized, &config);

    let mut summary = SummaryDocument {
        experiment,
        scenario: echo,
        network: NetworkSection {
            nodes: network.nodes(),
            deployment,
            channels: network.clone(),
            quantization,
            qsc,
            sc: scc.components.len() == 1,
            gamma: bundle.as_ref().map(|b| b.gamma.clone()),
            gamma_residual: bundle.as_ref().map(|b| b.gamma_residual()),
            scc,
        },
        conditions,
        spectral_bound,
        spectral_bound_error,
        stability,
        consensus: None,
        rate: None,
        compensation: None,
        gamma_estimate: None,
        pipeline: None,
        batch: None,
        timings: Timings {
            total_seconds: 0.0,
            phases: BTreeMap::new(),
        },
    };
    let mut trajectory_csv = None;
    let mut convergence = None;
    let n = network.nodes();
    let ds = options.downsample.max(1);

    match experiment {
        Experiment::Check => {}
        Experiment::Simulate | Experiment::Rate => {
            let tr = clock.time("simulate", || simulate(&quantized, &config))?;
            let report = consensus_report(&network, &quantized, &config, &tr)?;
            if experiment == Experiment::Rate {
                let alpha = report.alpha_theory.unwrap_or(report.mean_empirical);
                let empirical = clock.time("rate", || rate_empirical(&tr, alpha));
                let options = SpectralOptions {
                    cap: scenario.analysis.companion_cap,
                    ..SpectralOptions::default()
                };
                let spectrum = clock.time("rate", || rate_spectral(&quantized, &config, options));
                if let (Err(a), Err(b)) = (&empirical, &spectrum) {
                    warn!("spectral rate unavailable: {b}");
                    return Err(CliError::Analysis(a.clone()));
                }
                let relative_gap = match (&empirical, &spectrum) {
                    (Ok(e), Ok(s)) if s.decay_rate != 0.0 => Some((e - s.decay_rate).abs() / s.decay_rate.abs()),
                    _ => None,
                };
                summary.rate = Some(RateSection {
                    empirical: empirical.as_ref().ok().copied(),
                    empirical_error: empirical.as_ref().err().map(|e| e.to_string()),
                    spectrum: spectrum.as_ref().ok().cloned(),
                    spectrum_error: spectrum.as_ref().err().map(|e| e.to_string()),
                    relative_gap,
                });
            }
            let mut report = report;
            if let Some(rate) = &summary.rate {
                report.rate_empirical = rate.empirical;
                report.rate_spectral = rate.spectrum.as_ref().map(|s| s.decay_rate);
            }
            trajectory_csv = Some(trajectory_bytes(&tr, ds, None));
            convergence = Some(convergence_csv(&tr, &targets(&report, n), ds));
            summary.consensus = Some(report);
        }
        Experiment::Compensate => {
            let comp = clock.time("compensate", || compensate(&quantized, &config))?;
            let report = consensus_report(&network, &quantized, &config, &comp.run_inputs)?;
            trajectory_csv = Some(trajectory_bytes(
                &comp.run_inputs,
                ds,
                Some(&comp.result.ratio_timeseries),
            ));
            convergence = Some(convergence_csv(&comp.run_inputs, &targets(&report, n), ds));
            summary.consensus = Some(report);
            summary.compensation = Some(comp.result);
        }
        Experiment::EstimateGamma => {
            let estimate = clock.time("estimate", || estimate_gamma(&quantized, &config))?;
            let oracle_error = summary.network.gamma.as_ref().map(|g| {
                g.iter()
                    .zip(&estimate.gamma_tilde)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            });
            summary.gamma_estimate = Some(GammaSection { estimate, oracle_error });
        }
        Experiment::Pipeline => {
            let h = scenario.postmap;
            let map = move |x: f64| h.apply(x);
            let (result, comp) = clock.time("pipeline", || unbiased_pipeline(&quantized, &config, Some(&map)))?;
            let rescaled = config.clone().with_weights(result.rescaled_weights.clone());
            let report = consensus_report(&network, &quantized, &rescaled, &comp.run_inputs)?;
            trajectory_csv = Some(trajectory_bytes(
                &comp.run_inputs,
                ds,
                Some(&comp.result.ratio_timeseries),
            ));
            convergence = Some(convergence_csv(&comp.run_inputs, &targets(&report, n), ds));
            summary.consensus = Some(report);
            summary.compensation = Some(result.compensation.clone());
            summary.pipeline = Some(result);
        }
        Experiment::Batch => {
            let Some(d) = summary.network.deployment.clone() else {
                return Err(CliError::Config(ScenarioError::Invalid {
                    field: "topology".into(),
                    message: "batch needs a generated topology".into(),
                }));
            };
            if scenario.seeds.is_empty() {
                return Err(CliError::Config(ScenarioError::Invalid {
                    field: "seeds".into(),
                    message: "batch needs at least one seed".into(),
                }));
            }
            let spec = BatchSpec {
                positions: d.positions,
                connectivity: d.edges,
                params: d.params,
                config: config.clone(),
            };
            let out = clock
                .time("batch", || run_batch(&spec, &scenario.seeds, options.threads))
                .map_err(|message| {
                    CliError::Config(ScenarioError::Invalid {
                        field: "seeds".into(),
                        message,
                    })
                })?;
            summary.batch = Some(BatchSection {
                stats: out.stats,
                runs: out
                    .runs
                    .into_iter()
                    .map(|r| match r.outcome {
                        Ok((_, _, report)) => BatchRunSummary {
                            seed: r.seed,
                            error: None,
                            report: Some(report),
                        },
                        Err(e) => BatchRunSummary {
                            seed: r.seed,
                            error: Some(e),
                            report: None,
                        },
                    })
                    .collect(),
            });
        }
    }

    summary.timings = clock.finish();
    Ok(RunOutput {
        summary,
        trajectory_csv,
        convergence_csv: convergence,
    })
}

/// Writes the artifacts of `output` into `dir`. Files written before a
/// failure are removed again.
pub fn write_outputs(dir: &FsPath, output: &RunOutput) -> Result<Vec<PathBuf>, CliError> {
    let io = |path: &FsPath| {
        let path = path.display().to_string();
        move |source| CliError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let summary = serde_json::to_vec_pretty(&output.summary).expect("summary serializes");
    let mut files: Vec<(&str, &[u8])> = vec![("summary.json", &summary)];
    if let Some(t) = &output.trajectory_csv {
        files.push(("trajectory.csv", t));
    }
    if let Some(c) = &output.convergence_csv {
        files.push(("convergence.csv", c));
    }
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(io(&path)(e));
        }
        written.push(path);
    }
    Ok(written)
}

/// Worker cap from the environment, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            warn!("ignoring {THREADS_ENV}={raw:?}; expected a positive integer");
            None
        }
    }
}
