//! Closed-form predictions for the delayed consensus system: the
//! synchronized derivative value, the characteristic function
//! `p(s) = det(sI + Δ - H(s))`, the row-sum spectral bound, and two
//! independent estimates of the exponential convergence rate.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, NetworkModel, OmegaGrid};
use crate::digraph::{build_digraph, laplacian, GraphError};
use crate::linalg::complex_det;
use crate::simulator::{taps, SimConfig, SimError, Trajectory};

/// Floor for the denominator of relative errors.
pub const EPS_DENOM: f64 = 1e-12;

/// Default limit on the companion-matrix dimension.
pub const DEFAULT_COMPANION_CAP: usize = 4000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("consensus value denominator is {denominator} (delay-weighted gain sum {delay_term}); channel gains are not admissible")]
    NonPositiveDenominator { denominator: f64, delay_term: f64 },
    #[error("receiver {receiver} has non-positive dc row sum {sum}")]
    NonPositiveRowSum { receiver: usize, sum: f64 },
    #[error("trajectory did not converge; the rate fit is undefined")]
    NotConverged,
    #[error("residual is not decaying over the fit window (first {first:e}, last {last:e}); extend the horizon")]
    NonMonotone { first: f64, last: f64 },
    #[error("fit window has only {0} usable points")]
    ShortWindow(usize),
    #[error("companion dimension {dimension} exceeds cap {cap}; use the empirical rate")]
    DimensionCap { dimension: usize, cap: usize },
    #[error("subspace iteration did not settle after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("gamma has length {got}, expected {expected}")]
    GammaLength { got: usize, expected: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Synchronized derivative value
/// `Σγ_i c_i u_i / (Σγ_i c_i + K Σ_i γ_i Σ_j Σ_l a_ij τ_ij)`
/// evaluated with the delays stored in `network`.
pub fn alpha_star(network: &NetworkModel, gamma: &[f64], config: &SimConfig) -> Result<f64, AnalysisError> {
    let n = network.nodes();
    if gamma.len() != n {
        return Err(AnalysisError::GammaLength {
            got: gamma.len(),
            expected: n,
        });
    }
    config.validate_structure(n)?;
    let numerator: f64 = (0..n)
        .map(|i| gamma[i] * config.node_weights[i] * config.inputs[i])
        .sum();
    let weight: f64 = (0..n).map(|i| gamma[i] * config.node_weights[i]).sum();
    let delay_term: f64 = (0..n)
        .map(|i| gamma[i] * network.incoming(i).map(|c| c.delay_moment()).sum::<f64>())
        .sum();
    let denominator = weight + config.coupling_gain * delay_term;
    if denominator <= 0.0 {
        return Err(AnalysisError::NonPositiveDenominator {
            denominator,
            delay_term,
        });
    }
    Ok(numerator / denominator)
}

/// The consensus value under the simulated (quantized) delays and under the
/// original physical delays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPair {
    pub quantized: f64,
    pub exact: f64,
}

pub fn alpha_star_pair(
    original: &NetworkModel,
    quantized: &NetworkModel,
    gamma: &[f64],
    config: &SimConfig,
) -> Result<AlphaPair, AnalysisError> {
    Ok(AlphaPair {
        quantized: alpha_star(quantized, gamma, config)?,
        exact: alpha_star(original, gamma, config)?,
    })
}

/// Row-major `sI + Δ - H(s)`.
fn characteristic_matrix(network: &NetworkModel, config: &SimConfig, s: Complex64) -> Vec<Complex64> {
    let n = network.nodes();
    let mut m = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        m[i * n + i] = s;
    }
    for ch in network.channels() {
        let (r, q) = (ch.receiver(), ch.transmitter());
        let k = config.node_gain(r);
        m[r * n + r] += k * ch.dc_gain();
        m[r * n + q] -= k * ch.response_at(s);
    }
    m
}

/// `p(s) = det(sI + Δ - H(s))` with `Δ = diag(k_i deg_in(i))`,
/// `H_ij(s) = k_i Σ_l a_ij e^{-s τ_ij}` and `k_i = K / c_i`.
pub fn characteristic_value(network: &NetworkModel, config: &SimConfig, s: Complex64) -> Complex64 {
    complex_det(network.nodes(), characteristic_matrix(network, config, s))
}

/// Scale for judging `p(0) ≈ 0`: the product of the row norms of `Δ - H(0)`
/// bounds `|det|` (Hadamard).
pub fn characteristic_scale(network: &NetworkModel, config: &SimConfig) -> f64 {
    let n = network.nodes();
    let m = characteristic_matrix(network, config, Complex64::new(0.0, 0.0));
    (0..n)
        .map(|i| {
            let row: f64 = m[i * n..(i + 1) * n].iter().map(|z| z.norm_sqr()).sum();
            row.sqrt().max(1.0)
        })
        .product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralBoundReport {
    /// `max_ω max_r Σ_q |H_rq(jω)| / Σ_q H_rq(0)`.
    pub bound: f64,
    pub receiver: usize,
    pub omega: f64,
    pub holds: bool,
    pub omega_grid: OmegaGrid,
}

/// Max-row-sum norm of `Δ⁻¹H(jω)` over the grid. The gains `k_r` cancel
/// row by row, so the ratio is formed on channel responses directly.
pub fn sufficient_spectral_check(
    network: &NetworkModel,
    grid: OmegaGrid,
) -> Result<SpectralBoundReport, AnalysisError> {
    let n = network.nodes();
    let mut rows = Vec::new();
    for r in 0..n {
        let chans: Vec<_> = network.incoming(r).collect();
        if chans.is_empty() {
            continue;
        }
        let sum: f64 = chans.iter().map(|c| c.dc_gain()).sum();
        if sum <= 0.0 {
            return Err(AnalysisError::NonPositiveRowSum { receiver: r, sum });
        }
        rows.push((r, chans, sum));
    }
    let mut best = (f64::NEG_INFINITY, 0usize, 0.0);
    for omega in grid.points() {
        for (r, chans, sum) in &rows {
            let v = chans.iter().map(|c| c.magnitude(omega)).sum::<f64>() / sum;
            if v > best.0 {
                best = (v, *r, omega);
            }
        }
    }
    let bound = if rows.is_empty() { 0.0 } else { best.0 };
    Ok(SpectralBoundReport {
        bound,
        receiver: best.1,
        omega: best.2,
        holds: bound <= 1.0 + crate::channel::ROW_SUM_SLACK,
        omega_grid: grid,
    })
}

/// Least-squares decay rate (1/s) of `max_i |ẋ_i[k] - α|`.
///
/// The fit runs from a tenth of the window end to the first step where the
/// residual reaches `100·ε·scale`, or `converged_at`, whichever is earlier.
pub fn rate_empirical(trajectory: &Trajectory, alpha: f64) -> Result<f64, AnalysisError> {
    let conv = trajectory.converged_at.ok_or(AnalysisError::NotConverged)?;
    let residual = |k: usize| {
        trajectory
            .derivs_at(k)
            .iter()
            .fold(0.0_f64, |m, d| m.max((d - alpha).abs()))
    };
    let scale = alpha.abs().max(residual(0)).max(EPS_DENOM);
    let floor = 100.0 * f64::EPSILON * scale;
    let end = (0..=conv).find(|&k| residual(k) <= floor).unwrap_or(conv);
    let start = end / 10;
    let points: Vec<(f64, f64)> = (start..=end)
        .filter_map(|k| {
            let r = residual(k);
            (r > 0.0).then(|| (trajectory.time(k), r.ln()))
        })
        .collect();
    if points.len() < 8 {
        return Err(AnalysisError::ShortWindow(points.len()));
    }
    let quarter = points.len() / 4;
    let first = points[..quarter].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let last = points[points.len() - quarter..]
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    if last >= first {
        return Err(AnalysisError::NonMonotone {
            first: first.exp(),
            last: last.exp(),
        });
    }
    let m = points.len() as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
    Ok(-sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanionSpectrum {
    pub dimension: usize,
    /// `‖M·1 - 1‖_∞` for the consensus direction.
    pub unit_eigenvalue_residual: f64,
    pub second_modulus: f64,
    /// `-ln|λ₂| / T`.
    pub decay_rate: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    pub cap: usize,
    pub block: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_COMPANION_CAP,
            block: 8,
            max_iterations: 200_000,
            tolerance: 1e-11,
            seed: 0x5eed,
        }
    }
}

/// One-step map of the homogeneous sampled system over stacked delayed
/// states `z = (x[k], x[k-1], …, x[k-D])`.
pub struct CompanionMap {
    nodes: usize,
    depth: usize,
    /// Per receiver: `(transmitter, lag, T·k_i·a)`.
    taps: Vec<Vec<(usize, usize, f64)>>,
}

impl CompanionMap {
    pub fn new(network: &NetworkModel, config: &SimConfig) -> Result<Self, AnalysisError> {
        let n = network.nodes();
        config.validate_structure(n)?;
        let raw = taps(network, config.sample_time)?;
        let depth = raw.iter().flatten().map(|t| t.lag).max().unwrap_or(0) + 1;
        let taps = raw
            .iter()
            .enumerate()
            .map(|(i, ts)| {
                let g = config.sample_time * config.node_gain(i);
                ts.iter().map(|t| (t.transmitter, t.lag, g * t.amplitude)).collect()
            })
            .collect();
        Ok(Self { nodes: n, depth, taps })
    }

    pub fn dimension(&self) -> usize {
        self.nodes * self.depth
    }

    /// `out = M·z`.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let n = self.nodes;
        for i in 0..n {
            let xi = z[i];
            let s: f64 = self.taps[i].iter().map(|&(j, lag, w)| w * (z[lag * n + j] - xi)).sum();
            out[i] = xi + s;
        }
        out[n..].copy_from_slice(&z[..n * (self.depth - 1)]);
    }

    /// Dense matrix of the map, for small cross-checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.dimension();
        let mut dense = DMatrix::zeros(m, m);
        let mut e = vec![0.0; m];
        let mut col = vec![0.0; m];
        for j in 0..m {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..m {
                dense[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        dense
    }
}

fn deflate(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt. Vectors that vanish against the earlier ones are
/// dropped, so the block shrinks when the map has a nilpotent part.
fn orthonormalize(block: &mut Vec<Vec<f64>>) {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(block.len());
    for mut v in block.drain(..) {
        let before = dot(&v, &v).sqrt();
        for u in &kept {
            let c = dot(u, &v);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-10 * before && norm.is_finite() && norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
            kept.push(v);
        }
    }
    *block = kept;
}

/// Second-largest eigenvalue modulus of the companion map by block power
/// iteration on the complement of the consensus direction (the all-ones
/// vector, a right eigenvector for eigenvalue 1), with Rayleigh-Ritz
/// extraction on the block.
pub fn rate_spectral(
    network: &NetworkModel,
    config: &SimConfig,
    options: SpectralOptions,
) -> Result<CompanionSpectrum, AnalysisError> {
    let map = CompanionMap::new(network, config)?;
    let m = map.dimension();
    if m > options.cap {
        return Err(AnalysisError::DimensionCap {
            dimension: m,
            cap: options.cap,
        });
    }
    let mut buf = vec![0.0; m];
    map.apply(&vec![1.0; m], &mut buf);
    let unit_eigenvalue_residual = buf.iter().fold(0.0_f64, |a, x| a.max((x - 1.0).abs()));

    if m == 1 {
        return Ok(CompanionSpectrum {
            dimension: 1,
            unit_eigenvalue_residual,
            second_modulus: 0.0,
            decay_rate: f64::INFINITY,
            iterations: 0,
        });
    }

    let p = options.block.clamp(1, m - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut block: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            let mut v: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
            deflate(&mut v);
            v
        })
        .collect();
    orthonormalize(&mut block);

    let mut images = vec![vec![0.0; m]; block.len()];
    let mut last = f64::NAN;
    let mut stable = 0;
    let mut change = f64::INFINITY;
    for it in 1..=options.max_iterations {
        images.truncate(block.len());
        for (v, w) in block.iter().zip(images.iter_mut()) {
            map.apply(v, w);
            deflate(w);
        }
        // Ritz matrix Vᵀ(QMV) on the current orthonormal block
        let b = block.len();
        let ritz = DMatrix::from_fn(b, b, |i, j| dot(&block[i], &images[j]));
        let modulus = ritz
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0_f64, f64::max);
        std::mem::swap(&mut block, &mut images);
        orthonormalize(&mut block);
        if block.is_empty() {
            // the map annihilates the deflated space
            return Ok(CompanionSpectrum {
                dimension: m,
                unit_eigenvalue_residual,
                second_modulus: 0.0,
                decay_rate: f64::INFINITY,
                iterations: it,
            });
        }
        change = (modulus - last).abs();
        if change <= options.tolerance * modulus.max(1e-300) {
            stable += 1;
            if stable >= 20 {
                return Ok(CompanionSpectrum {
                    dimension: m,
                    unit_eigenvalue_residual,
                    second_modulus: modulus,
                    decay_rate: -modulus.ln() / config.sample_time,
                    iterations: it,
                });
            }
        } else {
            stable = 0;
        }
        last = modulus;
    }
    Err(AnalysisError::NoConvergence {
        iterations: options.max_iterations,
        change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    /// Consensus value under the simulated (quantized) delays; absent when
    /// the digraph is not QSC.
    pub alpha_theory: Option<f64>,
    pub alpha_theory_exact: Option<f64>,
    pub per_node_empirical: Vec<f64>,
    pub mean_empirical: f64,
    pub relative_error: Option<f64>,
    pub qsc: bool,
    pub sc: bool,
    pub gamma: Option<Vec<f64>>,
    pub rate_empirical: Option<f64>,
    pub rate_spectral: Option<f64>,
    pub converged: bool,
    pub converged_at: Option<usize>,
}

/// Assembles the theory-versus-simulation comparison for one run.
pub fn consensus_report(
    original: &NetworkModel,
    quantized: &NetworkModel,
    config: &SimConfig,
    trajectory: &Trajectory,
) -> Result<ConsensusReport, AnalysisError> {
    let g = build_digraph(quantized);
    let scc = crate::digraph::scc_decompose(&g);
    let qsc = scc.root_component.is_some();
    let (gamma, alpha) = if qsc {
        let bundle = laplacian(&g)?;
        let pair = alpha_star_pair(original, quantized, &bundle.gamma, config)?;
        (Some(bundle.gamma), Some(pair))
    } else {
        (None, None)
    };
    let mean = trajectory.mean_limit();
    Ok(ConsensusReport {
        alpha_theory: alpha.map(|a| a.quantized),
        alpha_theory_exact: alpha.map(|a| a.exact),
        relative_error: alpha.map(|a| (mean - a.quantized).abs() / a.quantized.abs().max(EPS_DENOM)),
        per_node_empirical: trajectory.per_node_limit.clone(),
        mean_empirical: mean,
        qsc,
        sc: scc.components.len() == 1,
        gamma,
        rate_empirical: None,
        rate_spectral: None,
        converged: trajectory.converged(),
        converged_at: trajectory.converged_at,
    })
}
