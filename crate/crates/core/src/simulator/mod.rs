//! Fixed-step integration of the delayed coupled system
//!
//! ```text
//! ẋ_i(t) = u_i + (K / c_i) Σ_j Σ_l a_ij^(l) (x_j(t - τ_ij^(l)) - x_i(t))
//! ```
//!
//! discretized with forward differences `x[k+1] = x[k] + T·rhs[k]` and path
//! delays expressed as integer sample lags. Consensus is detected on the
//! state derivative, not on the state.

mod batch;
mod delay_line;

use std::io::{self, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{NetworkModel, Path};

pub use batch::{run_batch, BatchOutcome, BatchRun, BatchSpec, BatchStats};
pub use delay_line::DelayLine;

/// States beyond this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default bound on `K·T·deg_in / c_i`.
pub const DEFAULT_STABILITY_MARGIN: f64 = 0.5;

/// Relative slack accepted when checking that a delay sits on the sample grid.
const LAG_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("{field} has length {got}, expected {expected}")]
    Length {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("channel {receiver}<-{transmitter} path {path}: delay {delay} s is not a multiple of T; quantize first")]
    NotQuantized {
        receiver: usize,
        transmitter: usize,
        path: usize,
        delay: f64,
    },
    #[error("state diverged at step {step}, node {node} (x = {value:e}, max K·T·deg/c = {kt_max:.3})")]
    Diverged {
        step: usize,
        node: usize,
        value: f64,
        kt_max: f64,
    },
}

/// Initial function on `[-τ, 0]`: `θ ↦ offset + slope·θ`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub slope: f64,
}

impl History {
    pub fn constant(offset: f64) -> Self {
        Self { offset, slope: 0.0 }
    }

    pub fn at(&self, theta: f64) -> f64 {
        self.offset + self.slope * theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Coupling gain `K`.
    pub coupling_gain: f64,
    /// Node coefficients `c_i`.
    pub node_weights: Vec<f64>,
    /// Local inputs `u_i = g_i(y_i)`.
    pub inputs: Vec<f64>,
    /// Step `T` in seconds.
    pub sample_time: f64,
    /// Number of steps.
    pub horizon: usize,
    /// Per-node initial functions; empty means zero everywhere.
    #[serde(default)]
    pub history: Vec<History>,
    #[serde(default = "default_eps")]
    pub epsilon_settle: f64,
    #[serde(default = "default_eps")]
    pub epsilon_consensus: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_margin")]
    pub stability_margin: f64,
}

fn default_eps() -> f64 {
    1e-9
}

fn default_window() -> usize {
    100
}

fn default_margin() -> f64 {
    DEFAULT_STABILITY_MARGIN
}

impl SimConfig {
    /// Config with unit weights, zero history and default tolerances.
    pub fn new(coupling_gain: f64, inputs: Vec<f64>, sample_time: f64, horizon: usize) -> Self {
        Self {
            coupling_gain,
            node_weights: vec![1.0; inputs.len()],
            inputs,
            sample_time,
            horizon,
            history: Vec::new(),
            epsilon_settle: default_eps(),
            epsilon_consensus: default_eps(),
            window: default_window(),
            stability_margin: default_margin(),
        }
    }

    pub fn with_weights(mut self, node_weights: Vec<f64>) -> Self {
        self.node_weights = node_weights;
        self
    }

    pub fn with_inputs(mut self, inputs: Vec<f64>) -> Self {
        self.inputs = inputs;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn nodes(&self) -> usize {
        self.inputs.len()
    }

    /// `k_i = K / c_i`.
    pub fn node_gain(&self, i: usize) -> f64 {
        self.coupling_gain / self.node_weights[i]
    }

    pub fn history_of(&self, i: usize) -> History {
        self.history.get(i).copied().unwrap_or_default()
    }

    /// Checks the shape and the numeric ranges that do not depend on the
    /// coupling gain sign.
    pub fn validate_structure(&self, nodes: usize) -> Result<(), SimError> {
        let check = |field, got| {
            if got == nodes {
                Ok(())
            } else {
                Err(SimError::Length {
                    field,
                    got,
                    expected: nodes,
                })
            }
        };
        check("inputs", self.inputs.len())?;
        check("node_weights", self.node_weights.len())?;
        if !self.history.is_empty() {
            check("history", self.history.len())?;
        }
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(SimError::Config("sample_time must be positive".into()));
        }
        if let Some(i) = self.node_weights.iter().position(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(SimError::Config(format!("node_weights[{i}] must be positive")));
        }
        if !(self.coupling_gain >= 0.0 && self.coupling_gain.is_finite()) {
            return Err(SimError::Config("coupling_gain must be nonnegative".into()));
        }
        if self.inputs.iter().any(|u| !u.is_finite()) {
            return Err(SimError::Config("inputs must be finite".into()));
        }
        Ok(())
    }

    pub fn validate(&self, nodes: usize) -> Result<(), SimError> {
        self.validate_structure(nodes)?;
        if self.coupling_gain <= 0.0 {
            return Err(SimError::Config("coupling_gain must be positive".into()));
        }
        if self.window < 2 || self.horizon < self.window {
            return Err(SimError::Config(format!(
                "need horizon >= window >= 2 (horizon {}, window {})",
                self.horizon, self.window
            )));
        }
        if !(self.epsilon_settle > 0.0 && self.epsilon_consensus > 0.0) {
            return Err(SimError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationReport {
    /// Largest `|τ - d·T|` in seconds.
    pub max_error: f64,
    /// Same, in samples.
    pub max_error_samples: f64,
    /// Largest lag `D_max` in samples.
    pub max_lag: usize,
}

/// Rounds every path delay to the nearest multiple of `sample_time`.
pub fn quantize_delays(network: &NetworkModel, sample_time: f64) -> (NetworkModel, QuantizationReport) {
    let mut max_error: f64 = 0.0;
    let mut max_lag = 0usize;
    let quantized = network.map_paths(|_, _, p| {
        let lag = (p.delay / sample_time).round().max(0.0);
        max_error = max_error.max((p.delay - lag * sample_time).abs());
        max_lag = max_lag.max(lag as usize);
        Path::new(p.amplitude, lag * sample_time)
    });
    (
        quantized,
        QuantizationReport {
            max_error,
            max_error_samples: max_error / sample_time,
            max_lag,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityBound {
    pub max_in_degree: f64,
    /// `K·T·Σ|a| / c_i` per node.
    pub kt_product: Vec<f64>,
    pub margin: f64,
    pub ok: bool,
}

impl StabilityBound {
    pub fn max_product(&self) -> f64 {
        self.kt_product.iter().copied().fold(0.0, f64::max)
    }
}

/// Step-size check for the explicit scheme. Uses absolute path gains so that
/// negative amplitudes make the bound more conservative, not less.
pub fn check_step_stability(network: &NetworkModel, config: &SimConfig) -> StabilityBound {
    let n = network.nodes();
    let degrees: Vec<f64> = (0..n)
        .map(|i| network.incoming(i).map(|c| c.abs_gain()).sum())
        .collect();
    let kt_product: Vec<f64> = degrees
        .iter()
        .enumerate()
        .map(|(i, d)| config.coupling_gain / config.node_weights[i] * config.sample_time * d)
        .collect();
    let max = kt_product.iter().copied().fold(0.0, f64::max);
    StabilityBound {
        max_in_degree: degrees.iter().copied().fold(0.0, f64::max),
        ok: max < config.stability_margin,
        kt_product,
        margin: config.stability_margin,
    }
}

/// Incoming path with its lag in samples.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub transmitter: usize,
    pub lag: usize,
    pub amplitude: f64,
}

/// Per-receiver taps of a quantized network.
pub(crate) fn taps(network: &NetworkModel, sample_time: f64) -> Result<Vec<Vec<Tap>>, SimError> {
    let mut out = vec![Vec::new(); network.nodes()];
    for ch in network.channels() {
        for (l, p) in ch.paths().iter().enumerate() {
            let exact = p.delay / sample_time;
            let lag = exact.round();
            if (exact - lag).abs() > LAG_TOLERANCE * lag.max(1.0) {
                return Err(SimError::NotQuantized {
                    receiver: ch.receiver(),
                    transmitter: ch.transmitter(),
                    path: l,
                    delay: p.delay,
                });
            }
            out[ch.receiver()].push(Tap {
                transmitter: ch.transmitter(),
                lag: lag as usize,
                amplitude: p.amplitude,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    nodes: usize,
    sample_time: f64,
    /// Step-major `(horizon + 1) × nodes`.
    states: Vec<f64>,
    /// Step-major `horizon × nodes`; exact right-hand side at each step.
    derivs: Vec<f64>,
    pub converged_at: Option<usize>,
    /// Mean derivative over the final window.
    pub per_node_limit: Vec<f64>,
}

impl Trajectory {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn horizon(&self) -> usize {
        self.derivs.len() / self.nodes
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.sample_time
    }

    pub fn state(&self, step: usize, node: usize) -> f64 {
        self.states[step * self.nodes + node]
    }

    pub fn deriv(&self, step: usize, node: usize) -> f64 {
        self.derivs[step * self.nodes + node]
    }

    pub fn states_at(&self, step: usize) -> &[f64] {
        &self.states[step * self.nodes..(step + 1) * self.nodes]
    }

    pub fn derivs_at(&self, step: usize) -> &[f64] {
        &self.derivs[step * self.nodes..(step + 1) * self.nodes]
    }

    /// `max_i ẋ_i - min_i ẋ_i` at `step`.
    pub fn spread(&self, step: usize) -> f64 {
        spread(self.derivs_at(step))
    }

    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    pub fn mean_limit(&self) -> f64 {
        self.per_node_limit.iter().sum::<f64>() / self.nodes as f64
    }

    /// Writes `step,time,node,x,xdot[,ratio]`, one row per node per step,
    /// keeping every `downsample`-th step. `ratio` is step-major like the
    /// derivatives.
    pub fn write_csv<W: Write>(&self, mut w: W, downsample: usize, ratio: Option<&[f64]>) -> io::Result<()> {
        let downsample = downsample.max(1);
        if ratio.is_some() {
            writeln!(w, "step,time,node,x,xdot,ratio")?;
        } else {
            writeln!(w, "step,time,node,x,xdot")?;
        }
        for k in (0..self.horizon()).step_by(downsample) {
            let t = self.time(k);
            for i in 0..self.nodes {
                write!(w, "{k},{t},{i},{},{}", self.state(k, i), self.deriv(k, i))?;
                match ratio {
                    Some(r) => writeln!(w, ",{}", r[k * self.nodes + i])?,
                    None => writeln!(w)?,
                }
            }
        }
        Ok(())
    }
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    hi - lo
}

/// Integrates the network from its initial functions for `config.horizon`
/// steps. Delays must already lie on the sample grid (see
/// [`quantize_delays`]).
pub fn simulate(network: &NetworkModel, config: &SimConfig) -> Result<Trajectory, SimError> {
    let n = network.nodes();
    config.validate(n)?;
    let stability = check_step_stability(network, config);
    if !stability.ok {
        warn!(
            "K·T·deg/c reaches {:.3}, above margin {}; the explicit scheme may diverge",
            stability.max_product(),
            stability.margin
        );
    }
    let taps = taps(network, config.sample_time)?;
    let max_lag = taps.iter().flatten().map(|t| t.lag).max().unwrap_or(0);
    let t = config.sample_time;
    let gains: Vec<f64> = (0..n).map(|i| config.node_gain(i)).collect();
    let horizon = config.horizon;
    let window = config.window;

    let mut line = DelayLine::new(n, max_lag, |i, m| config.history_of(i).at(-(m as f64) * t));
    let mut states = Vec::with_capacity((horizon + 1) * n);
    let mut derivs = Vec::with_capacity(horizon * n);
    states.extend((0..n).map(|i| line.get(i, 0)));
    let mut rhs = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut converged_at = None;

    for k in 0..horizon {
        for i in 0..n {
            let xi = line.get(i, 0);
            let coupling: f64 = taps[i]
                .iter()
                .map(|tap| tap.amplitude * (line.get(tap.transmitter, tap.lag) - xi))
                .sum();
            rhs[i] = config.inputs[i] + gains[i] * coupling;
            next[i] = xi + t * rhs[i];
        }
        if let Some(i) = next.iter().position(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT) {
            return Err(SimError::Diverged {
                step: k + 1,
                node: i,
                value: next[i],
                kt_max: stability.max_product(),
            });
        }
        derivs.extend_from_slice(&rhs);
        states.extend_from_slice(&next);
        line.push(&next);

        if converged_at.is_none() && k >= window && spread(&rhs) < config.epsilon_consensus {
            let past = &derivs[(k - window) * n..(k - window + 1) * n];
            if rhs.iter().zip(past).all(|(a, b)| (a - b).abs() < config.epsilon_settle) {
                converged_at = Some(k);
            }
        }
    }

    let tail = &derivs[(horizon - window) * n..];
    let per_node_limit = (0..n)
        .map(|i| tail.iter().skip(i).step_by(n).sum::<f64>() / window as f64)
        .collect();

    Ok(Trajectory {
        nodes: n,
        sample_time: t,
        states,
        derivs,
        converged_at,
        per_node_limit,
    })
}
