//! Bias compensation without channel knowledge.
//!
//! * Ratio compensation: run once with the real inputs and once with all
//!   inputs set to one. The ratio of the two consensus values cancels every
//!   amplitude and delay term, leaving `Σγ_i c_i u_i / Σγ_i c_i`.
//! * γ estimation: one all-ones run plus one run per node with the canonical
//!   input `e_i`; the ratio of consensus values gives `γ_i / Σγ`.
//! * Unbiased pipeline: rescale `c_i ← c_i / γ̃_i` on the support of γ̃ and
//!   compensate again, which yields `Σ c_i u_i / Σ c_i` over the root
//!   component (all nodes when the network is strongly connected).
//!
//! All sub-runs share the same channel realization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{alpha_star, AnalysisError};
use crate::channel::NetworkModel;
use crate::digraph::{build_digraph, laplacian, GraphError};
use crate::simulator::{simulate, SimConfig, SimError, Trajectory};

/// Normalization runs whose consensus value is below this are rejected.
pub const MIN_NORMALIZER: f64 = 1e-12;

/// Relative threshold separating structural zeros of γ̃ from noise.
pub const GAMMA_SUPPORT_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("run '{run}' failed: {source}")]
    Run { run: String, source: SimError },
    #[error("run '{run}' did not reach consensus within the horizon")]
    NotConverged { run: String },
    #[error("normalization run settled at {value:e}; ratio undefined")]
    DegenerateNormalizer { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationResult {
    /// Consensus value of the run with the real inputs.
    pub alpha_y: f64,
    /// Consensus value of the all-ones run.
    pub alpha_ones: f64,
    pub ratio: f64,
    /// `Σγ c u / Σγ c` from the Laplacian null vector.
    pub predicted_ratio: f64,
    /// Closed-form consensus values of the two runs.
    pub alpha_y_theory: f64,
    pub alpha_ones_theory: f64,
    /// Step-major running ratio `ẋ_i(t; y) / ẋ_i(t; 1)`.
    #[serde(skip)]
    pub ratio_timeseries: Vec<f64>,
}

/// Compensation result together with both trajectories.
#[derive(Debug, Clone)]
pub struct Compensation {
    pub result: CompensationResult,
    pub run_inputs: Trajectory,
    pub run_ones: Trajectory,
}

fn converged_run(network: &NetworkModel, config: &SimConfig, run: &str) -> Result<Trajectory, ProtocolError> {
    let tr = simulate(network, config).map_err(|source| ProtocolError::Run {
        run: run.to_string(),
        source,
    })?;
    if !tr.converged() {
        return Err(ProtocolError::NotConverged { run: run.to_string() });
    }
    Ok(tr)
}

/// Two-run ratio compensation on a quantized network.
pub fn compensate(network: &NetworkModel, config: &SimConfig) -> Result<Compensation, ProtocolError> {
    let gamma = laplacian(&build_digraph(network))?.gamma;
    let ones_cfg = config.clone().with_inputs(vec![1.0; network.nodes()]);
    let (run_inputs, run_ones) = rayon::join(
        || converged_run(network, config, "inputs"),
        || converged_run(network, &ones_cfg, "ones"),
    );
    let (run_inputs, run_ones) = (run_inputs?, run_ones?);

    let alpha_y = run_inputs.mean_limit();
    let alpha_ones = run_ones.mean_limit();
    if alpha_ones.abs() < MIN_NORMALIZER {
        return Err(ProtocolError::DegenerateNormalizer { value: alpha_ones });
    }

    let weighted: f64 = (0..network.nodes()).map(|i| gamma[i] * config.node_weights[i]).sum();
    let predicted_ratio = (0..network.nodes())
        .map(|i| gamma[i] * config.node_weights[i] * config.inputs[i])
        .sum::<f64>()
        / weighted;

    let n = network.nodes();
    let ratio_timeseries = (0..run_inputs.horizon() * n)
        .map(|idx| {
            let (k, i) = (idx / n, idx % n);
            run_inputs.deriv(k, i) / run_ones.deriv(k, i)
        })
        .collect();

    let result = CompensationResult {
        alpha_y,
        alpha_ones,
        ratio: alpha_y / alpha_ones,
        predicted_ratio,
        alpha_y_theory: alpha_star(network, &gamma, config)?,
        alpha_ones_theory: alpha_star(network, &gamma, &ones_cfg)?,
        ratio_timeseries,
    };
    Ok(Compensation {
        result,
        run_inputs,
        run_ones,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    /// Normalized weights, summing to one over the support.
    pub gamma_tilde: Vec<f64>,
    pub support: Vec<usize>,
    /// One all-ones run plus one canonical-input run per node.
    pub runs_used: usize,
    pub alpha_ones: f64,
    /// Consensus value of each canonical-input run.
    pub alpha_unit: Vec<f64>,
}

/// Estimates `γ / Σγ` from consensus runs alone. Node coefficients are held
/// at one during every run so that the ratios equal the normalized γ; the
/// caller's coefficients are untouched.
pub fn estimate_gamma(network: &NetworkModel, config: &SimConfig) -> Result<GammaEstimate, ProtocolError> {
    let n = network.nodes();
    let base = config.clone().with_weights(vec![1.0; n]);
    let ones = converged_run(network, &base.clone().with_inputs(vec![1.0; n]), "ones")?;
    let alpha_ones = ones.mean_limit();
    if alpha_ones.abs() < MIN_NORMALIZER {
        return Err(ProtocolError::DegenerateNormalizer { value: alpha_ones });
    }

    let alpha_unit = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            converged_run(network, &base.clone().with_inputs(e), &format!("e_{i}")).map(|t| t.mean_limit())
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let mut gamma_tilde: Vec<f64> = alpha_unit.iter().map(|a| a / alpha_ones).collect();
    let max = gamma_tilde.iter().fold(0.0_f64, |m, g| m.max(*g));
    for g in gamma_tilde.iter_mut() {
        if *g < GAMMA_SUPPORT_EPS * max {
            *g = 0.0;
        }
    }
    let sum: f64 = gamma_tilde.iter().sum();
    if sum <= 0.0 {
        return Err(ProtocolError::DegenerateNormalizer { value: sum });
    }
    gamma_tilde.iter_mut().for_each(|g| *g /= sum);
    let support = (0..n).filter(|&i| gamma_tilde[i] > 0.0).collect();

    Ok(GammaEstimate {
        gamma_tilde,
        support,
        runs_used: n + 1,
        alpha_ones,
        alpha_unit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    /// `h(ratio)`, or the ratio itself without a postmap.
    pub statistic: f64,
    pub ratio: f64,
    pub gamma: GammaEstimate,
    pub rescaled_weights: Vec<f64>,
    pub compensation: CompensationResult,
}

/// Full pipeline: estimate γ̃, rescale the coefficients on its support,
/// compensate, and apply `postmap`. Nodes outside the support keep their
/// coefficient; they cannot influence the consensus value, so the statistic
/// covers only the root component when the network is not strongly
/// connected.
pub fn unbiased_pipeline(
    network: &NetworkModel,
    config: &SimConfig,
    postmap: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<(PipelineResult, Compensation), ProtocolError> {
    let gamma = estimate_gamma(network, config)?;
    let rescaled_weights: Vec<f64> = config
        .node_weights
        .iter()
        .zip(&gamma.gamma_tilde)
        .map(|(c, g)| if *g > 0.0 { c / g } else { *c })
        .collect();
    let comp = compensate(network, &config.clone().with_weights(rescaled_weights.clone()))?;
    let ratio = comp.result.ratio;
    let statistic = postmap.map_or(ratio, |h| h(ratio));
    Ok((
        PipelineResult {
            statistic,
            ratio,
            gamma,
            rescaled_weights,
            compensation: comp.result.clone(),
        },
        comp,
    ))
}
