//! Scenario documents: a JSON description of one experiment.

use std::fmt;
use std::path::Path as FsPath;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    generate_network, geometric_connectivity, random_positions, speed_for_max_delay, ChannelError, ChannelModelParams,
    NetworkModel, DEFAULT_OMEGA_STEPS,
};
use crate::digraph::{is_qsc, is_sc, Digraph};
use crate::simulator::{History, SimConfig, DEFAULT_STABILITY_MARGIN};

/// Attempts made when searching for a connected random deployment.
pub const DEPLOYMENT_TRIES: u64 = 1000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unknown fields: {}", .0.join(", "))]
    UnknownFields(Vec<String>),
    #[error("`{field}` has length {got}, expected {expected}")]
    Length { field: String, got: usize, expected: usize },
    #[error("`{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Check,
    Simulate,
    Rate,
    Compensate,
    EstimateGamma,
    Pipeline,
    Batch,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Check => "check",
            Experiment::Simulate => "simulate",
            Experiment::Rate => "rate",
            Experiment::Compensate => "compensate",
            Experiment::EstimateGamma => "estimate-gamma",
            Experiment::Pipeline => "pipeline",
            Experiment::Batch => "batch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Requirement {
    Any,
    Qsc,
    Sc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPositions {
    pub count: usize,
    pub side: f64,
    #[serde(default)]
    pub seed: u64,
    /// Retry successive seeds until the radius graph meets this.
    #[serde(default = "default_requirement")]
    pub require: Requirement,
}

fn default_requirement() -> Requirement {
    Requirement::Any
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    Explicit(Vec<[f64; 2]>),
    Random(RandomPositions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// `[receiver, transmitter]` pairs.
    Edges(Vec<(usize, usize)>),
    /// Both directions between nodes within this distance.
    Radius(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "half")]
    pub sigma_n: f64,
    /// Defaults to the sampling time.
    #[serde(default)]
    pub tau0: Option<f64>,
    #[serde(default = "five")]
    pub paths: usize,
    /// Propagation speed in m/s; when absent it is derived from
    /// `max_delay_samples`.
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub max_delay_samples: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub positions: Positions,
    pub connectivity: Connectivity,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Explicit(NetworkModel),
    Generated(Generated),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSection {
    pub coupling_gain: f64,
    pub sample_time: f64,
    pub horizon: usize,
    #[serde(default)]
    pub history: Vec<History>,
    #[serde(default = "eps")]
    pub epsilon_settle: f64,
    #[serde(default = "eps")]
    pub epsilon_consensus: f64,
    #[serde(default = "window")]
    pub window: usize,
    #[serde(default = "margin")]
    pub stability_margin: f64,
}

fn eps() -> f64 {
    1e-9
}

fn window() -> usize {
    100
}

fn margin() -> f64 {
    DEFAULT_STABILITY_MARGIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    /// `u_i = g_i(y_i)`.
    pub u: Vec<f64>,
    /// Node coefficients; all ones when omitted.
    #[serde(default)]
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSection {
    #[serde(default = "omega_steps")]
    pub omega_steps: usize,
    #[serde(default = "companion_cap")]
    pub companion_cap: usize,
}

fn omega_steps() -> usize {
    DEFAULT_OMEGA_STEPS
}

fn companion_cap() -> usize {
    crate::analysis::DEFAULT_COMPANION_CAP
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            omega_steps: omega_steps(),
            companion_cap: companion_cap(),
        }
    }
}

/// Scalar map applied to the compensated ratio by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Postmap {
    #[default]
    Identity,
    Square,
    Sqrt,
    Exp,
    Ln,
}

impl Postmap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Postmap::Identity => x,
            Postmap::Square => x * x,
            Postmap::Sqrt => x.sqrt(),
            Postmap::Exp => x.exp(),
            Postmap::Ln => x.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    pub topology: Topology,
    pub sim: SimSection,
    pub inputs: Inputs,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub postmap: Postmap,
    /// Channel seeds for batch runs.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    Strict,
    Lenient,
}

/// Reads and validates a scenario. Unknown fields are rejected in strict mode
/// and logged otherwise.
pub fn load_scenario(path: &FsPath, strictness: Strictness) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, strictness)
}

pub fn parse_scenario(text: &str, strictness: Strictness) -> Result<Scenario, ScenarioError> {
    let mut unknown = Vec::new();
    let mut track = serde_path_to_error::Track::new();
    let mut json = serde_json::Deserializer::from_str(text);
    let tracked = serde_path_to_error::Deserializer::new(&mut json, &mut track);
    let parsed: Result<Scenario, _> = serde_ignored::deserialize(tracked, |p| unknown.push(p.to_string()));
    let mut scenario = parsed.map_err(|e| ScenarioError::Schema {
        path: track.path().to_string(),
        message: e.to_string(),
    })?;
    json.end().map_err(|e| ScenarioError::Schema {
        path: ".".into(),
        message: e.to_string(),
    })?;
    if !unknown.is_empty() {
        match strictness {
            Strictness::Strict => return Err(ScenarioError::UnknownFields(unknown)),
            Strictness::Lenient => {
                for f in &unknown {
                    warn!("ignoring unknown scenario field `{f}`");
                }
            }
        }
    }
    scenario.resolve()?;
    Ok(scenario)
}

/// Positions, `(receiver, transmitter)` edges and the seed that produced them.
pub type Placement = (Vec<[f64; 2]>, Vec<(usize, usize)>, u64);

/// Deployment searched over successive seeds starting at `seed` until the
/// radius graph satisfies `require`. Returns positions, edges and the seed
/// that was used.
pub fn connected_deployment(
    count: usize,
    side: f64,
    radius: f64,
    seed: u64,
    require: Requirement,
) -> Result<Placement, ScenarioError> {
    for s in seed..seed.saturating_add(DEPLOYMENT_TRIES) {
        let positions = random_positions(count, side, s);
        let edges = geometric_connectivity(&positions, radius);
        let ok = match require {
            Requirement::Any => true,
            _ => {
                let g = Digraph::from_arcs(count, &edges.iter().map(|&(r, q)| (q, r)).collect::<Vec<_>>())
                    .expect("geometric edges have no self-loops");
                if require == Requirement::Sc {
                    is_sc(&g)
                } else {
                    is_qsc(&g)
                }
            }
        };
        if ok {
            return Ok((positions, edges, s));
        }
    }
    Err(invalid(
        "topology.generated.positions.random",
        format!("no deployment meeting {require:?} within {DEPLOYMENT_TRIES} seeds"),
    ))
}

impl Scenario {
    /// Node count implied by the topology.
    pub fn nodes(&self) -> usize {
        match &self.topology {
            Topology::Explicit(n) => n.nodes(),
            Topology::Generated(g) => match &g.positions {
                Positions::Explicit(p) => p.len(),
                Positions::Random(r) => r.count,
            },
        }
    }

    /// Fills defaults in place and checks cross-field consistency.
    fn resolve(&mut self) -> Result<(), ScenarioError> {
        let n = self.nodes();
        if n == 0 {
            return Err(invalid("topology", "network must have at least one node"));
        }
        if self.inputs.c.is_empty() {
            self.inputs.c = vec![1.0; n];
        }
        let lengths = [("inputs.u", self.inputs.u.len()), ("inputs.c", self.inputs.c.len())];
        for (field, got) in lengths {
            if got != n {
                return Err(ScenarioError::Length {
                    field: field.into(),
                    got,
                    expected: n,
                });
            }
        }
        if !self.sim.history.is_empty() && self.sim.history.len() != n {
            return Err(ScenarioError::Length {
                field: "sim.history".into(),
                got: self.sim.history.len(),
                expected: n,
            });
        }
        if let Some(i) = self.inputs.c.iter().position(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(invalid(&format!("inputs.c[{i}]"), "must be positive"));
        }
        if !(self.sim.coupling_gain > 0.0 && self.sim.coupling_gain.is_finite()) {
            return Err(invalid("sim.coupling_gain", "must be positive"));
        }
        if !(self.sim.sample_time > 0.0 && self.sim.sample_time.is_finite()) {
            return Err(invalid("sim.sample_time", "must be positive"));
        }
        if self.sim.window < 2 || self.sim.horizon < self.sim.window {
            return Err(invalid("sim.horizon", "need horizon >= window >= 2"));
        }
        if self.analysis.omega_steps < 2 {
            return Err(invalid("analysis.omega_steps", "need at least 2 points"));
        }
        let t = self.sim.sample_time;
        if let Topology::Generated(g) = &mut self.topology {
            if let Connectivity::Edges(edges) = &g.connectivity {
                if let Some(&(r, q)) = edges.iter().find(|(r, q)| r == q || *r >= n || *q >= n) {
                    return Err(invalid(
                        "topology.generated.connectivity",
                        format!("edge [{r}, {q}] is a self-loop or out of range"),
                    ));
                }
            }
            let m = &mut g.model;
            m.tau0.get_or_insert(t);
            if m.speed.is_none() && m.max_delay_samples.is_none() {
                m.max_delay_samples = Some(30.0);
            }
            self.channel_params()?.validate()?;
        }
        Ok(())
    }

    /// Channel model parameters, with the speed still unresolved when it is
    /// derived from the deployment (`speed` is then a placeholder 1.0).
    fn channel_params(&self) -> Result<ChannelModelParams, ScenarioError> {
        let Topology::Generated(g) = &self.topology else {
            return Err(invalid("topology", "explicit topology has no channel model"));
        };
        let m = &g.model;
        Ok(ChannelModelParams {
            amplitude: m.amplitude,
            sigma_n: m.sigma_n,
            tau0: m.tau0.unwrap_or(self.sim.sample_time),
            sample_time: self.sim.sample_time,
            paths: m.paths,
            speed: m.speed.unwrap_or(1.0),
            seed: m.seed,
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            coupling_gain: self.sim.coupling_gain,
            node_weights: self.inputs.c.clone(),
            inputs: self.inputs.u.clone(),
            sample_time: self.sim.sample_time,
            horizon: self.sim.horizon,
            history: self.sim.history.clone(),
            epsilon_settle: self.sim.epsilon_settle,
            epsilon_consensus: self.sim.epsilon_consensus,
            window: self.sim.window,
            stability_margin: self.sim.stability_margin,
        }
    }

    /// Replaces the channel-model seed (generated topologies only).
    pub fn override_seed(&mut self, seed: u64) {
        if let Topology::Generated(g) = &mut self.topology {
            g.model.seed = seed;
        }
    }

    /// Positions, edges and fully resolved channel parameters of a generated
    /// topology.
    pub fn deployment(&self) -> Result<Option<Deployment>, ScenarioError> {
        let Topology::Generated(g) = &self.topology else {
            return Ok(None);
        };
        let (positions, edges, position_seed) = match (&g.positions, &g.connectivity) {
            (Positions::Explicit(p), Connectivity::Edges(e)) => (p.clone(), e.clone(), None),
            (Positions::Explicit(p), Connectivity::Radius(r)) => (p.clone(), geometric_connectivity(p, *r), None),
            (Positions::Random(rp), conn) => {
                let radius = match conn {
                    Connectivity::Radius(r) => *r,
                    Connectivity::Edges(_) => f64::INFINITY,
                };
                let (p, e, s) = connected_deployment(rp.count, rp.side, radius, rp.seed, rp.require)?;
                match conn {
                    Connectivity::Edges(explicit) => (p, explicit.clone(), Some(s)),
                    Connectivity::Radius(_) => (p, e, Some(s)),
                }
            }
        };
        let mut params = self.channel_params()?;
        if g.model.speed.is_none() {
            let samples = g.model.max_delay_samples.unwrap_or(30.0);
            params.speed = speed_for_max_delay(&positions, &edges, params.sample_time, samples)?;
        }
        Ok(Some(Deployment {
            position_seed,
            positions,
            edges,
            params,
        }))
    }

    /// The network realization this scenario describes.
    pub fn build_network(&self) -> Result<NetworkModel, ScenarioError> {
        match &self.topology {
            Topology::Explicit(n) => Ok(n.clone()),
            Topology::Generated(_) => {
                let d = self.deployment()?.expect("generated topology");
                Ok(generate_network(&d.positions, &d.edges, &d.params)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deployment {
    /// Seed that produced random positions, after skipping rejected ones.
    pub position_seed: Option<u64>,
    pub positions: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    pub params: ChannelModelParams,
}
