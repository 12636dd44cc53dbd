//! Multipath channel model.
//!
//! A link from transmitter `q` to receiver `r` is a real FIR-like channel made
//! of discrete paths, each with an amplitude and a propagation delay. Its
//! transfer function is `H_rq(jω) = Σ_l a_l · exp(-jω τ_l)`.
//!
//! This module also hosts the seeded random generator for fading channels
//! over a geometric deployment and the per-receiver frequency-domain check of
//! the sufficient convergence condition.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when comparing the row-sum ratio against one.
pub const ROW_SUM_SLACK: f64 = 1e-12;

/// Default number of frequency points for the condition sweep.
pub const DEFAULT_OMEGA_STEPS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel {receiver}<-{transmitter} is a self-loop")]
    SelfLoop { receiver: usize, transmitter: usize },
    #[error("channel {receiver}<-{transmitter} references a node outside 0..{nodes}")]
    InvalidNode {
        receiver: usize,
        transmitter: usize,
        nodes: usize,
    },
    #[error("channel {receiver}<-{transmitter} has no paths")]
    NoPaths { receiver: usize, transmitter: usize },
    #[error("channel {receiver}<-{transmitter} declared twice")]
    Duplicate { receiver: usize, transmitter: usize },
    #[error("channel {receiver}<-{transmitter}: path {index} has invalid {what}")]
    InvalidPath {
        receiver: usize,
        transmitter: usize,
        index: usize,
        what: &'static str,
    },
    #[error("network must have at least one node")]
    Empty,
    #[error("invalid channel model parameter: {0}")]
    InvalidParams(String),
    #[error("position list has {got} entries for {nodes} nodes")]
    PositionCount { got: usize, nodes: usize },
    #[error("omega grid needs at least two points, got {0}")]
    OmegaGrid(usize),
}

/// One propagation path: a real gain and a delay in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub amplitude: f64,
    pub delay: f64,
}

impl Path {
    pub fn new(amplitude: f64, delay: f64) -> Self {
        Self { amplitude, delay }
    }
}

/// Channel through which `receiver` hears `transmitter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChannel", into = "RawChannel")]
pub struct MultipathChannel {
    receiver: usize,
    transmitter: usize,
    paths: Vec<Path>,
    dc_gain: f64,
}

#[derive(Serialize, Deserialize)]
struct RawChannel {
    receiver: usize,
    transmitter: usize,
    paths: Vec<Path>,
}

impl TryFrom<RawChannel> for MultipathChannel {
    type Error = ChannelError;

    fn try_from(raw: RawChannel) -> Result<Self, Self::Error> {
        MultipathChannel::new(raw.receiver, raw.transmitter, raw.paths)
    }
}

impl From<MultipathChannel> for RawChannel {
    fn from(ch: MultipathChannel) -> Self {
        RawChannel {
            receiver: ch.receiver,
            transmitter: ch.transmitter,
            paths: ch.paths,
        }
    }
}

impl MultipathChannel {
    pub fn new(receiver: usize, transmitter: usize, paths: Vec<Path>) -> Result<Self, ChannelError> {
        if receiver == transmitter {
            return Err(ChannelError::SelfLoop { receiver, transmitter });
        }
        if paths.is_empty() {
            return Err(ChannelError::NoPaths { receiver, transmitter });
        }
        for (index, p) in paths.iter().enumerate() {
            let what = if !p.amplitude.is_finite() {
                Some("amplitude")
            } else if !p.delay.is_finite() || p.delay < 0.0 {
                Some("delay")
            } else {
                None
            };
            if let Some(what) = what {
                return Err(ChannelError::InvalidPath {
                    receiver,
                    transmitter,
                    index,
                    what,
                });
            }
        }
        let dc_gain = paths.iter().map(|p| p.amplitude).sum();
        Ok(Self {
            receiver,
            transmitter,
            paths,
            dc_gain,
        })
    }

    /// Single-path convenience constructor.
    pub fn single(receiver: usize, transmitter: usize, amplitude: f64, delay: f64) -> Result<Self, ChannelError> {
        Self::new(receiver, transmitter, vec![Path::new(amplitude, delay)])
    }

    pub fn receiver(&self) -> usize {
        self.receiver
    }

    pub fn transmitter(&self) -> usize {
        self.transmitter
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    /// `H(0)`, the sum of path amplitudes.
    pub fn dc_gain(&self) -> f64 {
        self.dc_gain
    }

    /// Largest path delay.
    pub fn max_delay(&self) -> f64 {
        self.paths.iter().map(|p| p.delay).fold(0.0, f64::max)
    }

    /// `Σ_l a_l τ_l`, the delay-weighted gain entering the consensus value.
    pub fn delay_moment(&self) -> f64 {
        self.paths.iter().map(|p| p.amplitude * p.delay).sum()
    }

    /// `Σ_l |a_l|`.
    pub fn abs_gain(&self) -> f64 {
        self.paths.iter().map(|p| p.amplitude.abs()).sum()
    }

    /// Transfer function at angular frequency `omega` (rad/s).
    pub fn frequency_response(&self, omega: f64) -> Complex64 {
        self.response_at(Complex64::new(0.0, omega))
    }

    /// `Σ_l a_l e^{-s τ_l}` for complex `s`.
    pub fn response_at(&self, s: Complex64) -> Complex64 {
        if s == Complex64::new(0.0, 0.0) {
            return Complex64::new(self.dc_gain, 0.0);
        }
        self.paths.iter().map(|p| p.amplitude * (-s * p.delay).exp()).sum()
    }

    /// `|H(jω)|`. Single-path channels have constant modulus `|a|`.
    pub fn magnitude(&self, omega: f64) -> f64 {
        match self.paths.as_slice() {
            [p] => p.amplitude.abs(),
            _ => self.frequency_response(omega).norm(),
        }
    }

    pub(crate) fn with_paths(&self, paths: Vec<Path>) -> Self {
        let dc_gain = paths.iter().map(|p| p.amplitude).sum();
        Self {
            receiver: self.receiver,
            transmitter: self.transmitter,
            paths,
            dc_gain,
        }
    }
}

/// A set of nodes together with the channels between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork", into = "RawNetwork")]
pub struct NetworkModel {
    nodes: usize,
    positions: Option<Vec<[f64; 2]>>,
    channels: Vec<MultipathChannel>,
}

#[derive(Serialize, Deserialize)]
struct RawNetwork {
    nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 2]>>,
    channels: Vec<MultipathChannel>,
}

impl TryFrom<RawNetwork> for NetworkModel {
    type Error = ChannelError;

    fn try_from(raw: RawNetwork) -> Result<Self, Self::Error> {
        let net = NetworkModel::new(raw.nodes, raw.channels)?;
        match raw.positions {
            Some(p) => net.with_positions(p),
            None => Ok(net),
        }
    }
}

impl From<NetworkModel> for RawNetwork {
    fn from(n: NetworkModel) -> Self {
        RawNetwork {
            nodes: n.nodes,
            positions: n.positions,
            channels: n.channels,
        }
    }
}

impl NetworkModel {
    /// Validates node indices and uniqueness; channels are kept sorted by
    /// `(receiver, transmitter)`.
    pub fn new(nodes: usize, mut channels: Vec<MultipathChannel>) -> Result<Self, ChannelError> {
        if nodes == 0 {
            return Err(ChannelError::Empty);
        }
        for ch in &channels {
            if ch.receiver >= nodes || ch.transmitter >= nodes {
                return Err(ChannelError::InvalidNode {
                    receiver: ch.receiver,
                    transmitter: ch.transmitter,
                    nodes,
                });
            }
        }
        channels.sort_by_key(|c| (c.receiver, c.transmitter));
        for w in channels.windows(2) {
            if (w[0].receiver, w[0].transmitter) == (w[1].receiver, w[1].transmitter) {
                return Err(ChannelError::Duplicate {
                    receiver: w[0].receiver,
                    transmitter: w[0].transmitter,
                });
            }
        }
        Ok(Self {
            nodes,
            positions: None,
            channels,
        })
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Result<Self, ChannelError> {
        if positions.len() != self.nodes {
            return Err(ChannelError::PositionCount {
                got: positions.len(),
                nodes: self.nodes,
            });
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn channels(&self) -> &[MultipathChannel] {
        &self.channels
    }

    /// Channels terminating at `receiver`.
    pub fn incoming(&self, receiver: usize) -> impl Iterator<Item = &MultipathChannel> {
        self.channels.iter().filter(move |c| c.receiver == receiver)
    }

    pub fn max_delay(&self) -> f64 {
        self.channels.iter().map(|c| c.max_delay()).fold(0.0, f64::max)
    }

    /// Applies `f` to every path, keeping the topology.
    pub fn map_paths(&self, mut f: impl FnMut(&MultipathChannel, usize, Path) -> Path) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|ch| {
                let paths = ch.paths.iter().enumerate().map(|(l, p)| f(ch, l, *p)).collect();
                ch.with_paths(paths)
            })
            .collect();
        Self {
            nodes: self.nodes,
            positions: self.positions.clone(),
            channels,
        }
    }
}

/// Parameters of the random fading model
/// `a^(p) = (A + w) e^{-pT/τ0}`, `τ^(p) = d/c + pT`, `p = 0..L-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModelParams {
    /// Deterministic amplitude component.
    pub amplitude: f64,
    /// Standard deviation of the Gaussian fading term.
    pub sigma_n: f64,
    /// Delay spread in seconds.
    pub tau0: f64,
    /// Sampling time in seconds.
    pub sample_time: f64,
    /// Number of paths per link.
    pub paths: usize,
    /// Propagation speed in m/s.
    pub speed: f64,
    pub seed: u64,
}

impl ChannelModelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::InvalidParams(m.to_string()));
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return bad("sample_time must be positive");
        }
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return bad("tau0 must be positive");
        }
        if self.paths == 0 {
            return bad("paths must be at least 1");
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return bad("speed must be positive");
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return bad("sigma_n must be nonnegative");
        }
        if !self.amplitude.is_finite() {
            return bad("amplitude must be finite");
        }
        Ok(())
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Draws a network realization from the fading model.
///
/// Gaussian draws come from a ChaCha8 stream seeded with `params.seed`, and
/// are consumed edge by edge in `(receiver, transmitter)` order, then by path
/// index, so a seed fully determines the result.
pub fn generate_network(
    positions: &[[f64; 2]],
    connectivity: &[(usize, usize)],
    params: &ChannelModelParams,
) -> Result<NetworkModel, ChannelError> {
    params.validate()?;
    let nodes = positions.len();
    let edges: BTreeSet<(usize, usize)> = connectivity.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, params.sigma_n).map_err(|e| ChannelError::InvalidParams(e.to_string()))?;
    let mut channels = Vec::with_capacity(edges.len());
    for &(r, q) in &edges {
        if r >= nodes || q >= nodes {
            return Err(ChannelError::InvalidNode {
                receiver: r,
                transmitter: q,
                nodes,
            });
        }
        let propagation = distance(positions[r], positions[q]) / params.speed;
        let paths = (0..params.paths)
            .map(|p| {
                let w = normal.sample(&mut rng);
                let pf = p as f64;
                Path::new(
                    (params.amplitude + w) * (-pf * params.sample_time / params.tau0).exp(),
                    propagation + pf * params.sample_time,
                )
            })
            .collect();
        channels.push(MultipathChannel::new(r, q, paths)?);
    }
    NetworkModel::new(nodes, channels)?.with_positions(positions.to_vec())
}

/// Propagation speed that makes the longest linked distance take
/// `samples · sample_time` seconds.
pub fn speed_for_max_delay(
    positions: &[[f64; 2]],
    connectivity: &[(usize, usize)],
    sample_time: f64,
    samples: f64,
) -> Result<f64, ChannelError> {
    let d_max = connectivity
        .iter()
        .map(|&(r, q)| distance(positions[r], positions[q]))
        .fold(0.0, f64::max);
    if d_max <= 0.0 || samples <= 0.0 || sample_time <= 0.0 {
        return Err(ChannelError::InvalidParams(
            "cannot derive a propagation speed from a zero-length deployment".into(),
        ));
    }
    Ok(d_max / (samples * sample_time))
}

/// Uniform random positions in a `side × side` square.
pub fn random_positions(count: usize, side: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| [rng.gen::<f64>() * side, rng.gen::<f64>() * side])
        .collect()
}

/// Both directed edges between every pair of nodes within `radius`.
pub fn geometric_connectivity(positions: &[[f64; 2]], radius: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for r in 0..positions.len() {
        for q in 0..positions.len() {
            if r != q && distance(positions[r], positions[q]) <= radius {
                edges.push((r, q));
            }
        }
    }
    edges
}

/// Uniform grid on `[0, omega_max]` including both endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaGrid {
    pub omega_max: f64,
    pub steps: usize,
}

impl OmegaGrid {
    pub fn new(omega_max: f64, steps: usize) -> Result<Self, ChannelError> {
        if steps < 2 {
            return Err(ChannelError::OmegaGrid(steps));
        }
        Ok(Self { omega_max, steps })
    }

    /// Nyquist band `[0, π/T]` of the sampled system.
    pub fn nyquist(sample_time: f64, steps: usize) -> Result<Self, ChannelError> {
        Self::new(PI / sample_time, steps)
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let last = (self.steps - 1) as f64;
        (0..self.steps).map(move |k| {
            if k + 1 == self.steps {
                self.omega_max
            } else {
                self.omega_max * k as f64 / last
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDc {
    pub receiver: usize,
    pub transmitter: usize,
    pub dc_gain: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverBound {
    pub receiver: usize,
    pub dc_row_sum: f64,
    /// `max_ω Σ_q |H_rq(jω)| / Σ_q H_rq(0)`; absent when the dc row sum is
    /// not positive.
    pub worst_ratio: Option<f64>,
    pub worst_omega: Option<f64>,
    pub rowsum_bound_holds: bool,
}

/// Outcome of the frequency-domain condition check. The row-sum bound is a
/// sufficient condition only; a violation does not imply divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub dc_positive: Vec<ChannelDc>,
    pub receivers: Vec<ReceiverBound>,
    pub omega_grid: OmegaGrid,
    pub all_dc_positive: bool,
    pub all_rowsum_hold: bool,
    pub sufficient_only: bool,
    pub note: String,
}

/// Evaluates `H_rq(0) > 0` per channel and the per-receiver row-sum bound on
/// the grid `[0, omega_max]`.
pub fn check_conditions(
    network: &NetworkModel,
    omega_max: f64,
    omega_steps: usize,
) -> Result<ConditionReport, ChannelError> {
    let grid = OmegaGrid::new(omega_max, omega_steps)?;
    let dc_positive: Vec<ChannelDc> = network
        .channels()
        .iter()
        .map(|c| ChannelDc {
            receiver: c.receiver(),
            transmitter: c.transmitter(),
            dc_gain: c.dc_gain(),
            positive: c.dc_gain() > 0.0,
        })
        .collect();

    let mut receivers = Vec::new();
    for r in 0..network.nodes() {
        let incoming: Vec<&MultipathChannel> = network.incoming(r).collect();
        if incoming.is_empty() {
            continue;
        }
        let dc_row_sum: f64 = incoming.iter().map(|c| c.dc_gain()).sum();
        if dc_row_sum <= 0.0 {
            receivers.push(ReceiverBound {
                receiver: r,
                dc_row_sum,
                worst_ratio: None,
                worst_omega: None,
                rowsum_bound_holds: false,
            });
            continue;
        }
        let (worst_omega, worst_ratio) = grid
            .points()
            .map(|w| {
                let s: f64 = incoming.iter().map(|c| c.magnitude(w)).sum();
                (w, s / dc_row_sum)
            })
            .fold((0.0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        receivers.push(ReceiverBound {
            receiver: r,
            dc_row_sum,
            worst_ratio: Some(worst_ratio),
            worst_omega: Some(worst_omega),
            rowsum_bound_holds: worst_ratio <= 1.0 + ROW_SUM_SLACK,
        });
    }

    let commensurate = network.channels().iter().all(|c| {
        c.paths().iter().all(|p| {
            let k = p.delay * grid.omega_max / PI;
            (k - k.round()).abs() < 1e-9
        })
    });
    let note = if commensurate {
        "row-sum bound is sufficient, not necessary; delays are multiples of pi/omega_max so the grid covers one period"
    } else {
        "row-sum bound is sufficient, not necessary; delays are incommensurate with the grid, sweep is an approximation"
    };

    Ok(ConditionReport {
        all_dc_positive: dc_positive.iter().all(|d| d.positive),
        all_rowsum_hold: receivers.iter().all(|r| r.rowsum_bound_holds),
        dc_positive,
        receivers,
        omega_grid: grid,
        sufficient_only: true,
        note: note.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: f64 = 1e-3;

    fn two_path() -> MultipathChannel {
        MultipathChannel::new(1, 0, vec![Path::new(1.0, 0.0), Path::new(-0.5, T)]).unwrap()
    }

    #[test]
    fn single_path_has_unit_modulus() {
        let ch = MultipathChannel::single(1, 0, 1.0, 5.0).unwrap();
        assert_eq!(ch.frequency_response(0.0), Complex64::new(1.0, 0.0));
        for w in [0.1, 1.0, 17.3, 1e4] {
            assert!((ch.frequency_response(w).norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn two_path_response_at_nyquist() {
        let ch = two_path();
        let h = ch.frequency_response(PI / T);
        assert!((h - Complex64::new(1.5, 0.0)).norm() < 1e-12);
        assert_eq!(ch.frequency_response(0.0).re, 0.5);
    }

    #[test]
    fn rejects_self_loops_and_bad_paths() {
        assert!(matches!(
            MultipathChannel::single(2, 2, 1.0, 0.0),
            Err(ChannelError::SelfLoop { .. })
        ));
        assert!(matches!(
            MultipathChannel::single(0, 1, 1.0, -1.0),
            Err(ChannelError::InvalidPath { what: "delay", .. })
        ));
        assert!(matches!(
            MultipathChannel::new(0, 1, vec![]),
            Err(ChannelError::NoPaths { .. })
        ));
        let a = MultipathChannel::single(0, 1, 1.0, 0.0).unwrap();
        assert!(matches!(
            NetworkModel::new(2, vec![a.clone(), a]),
            Err(ChannelError::Duplicate { .. })
        ));
    }

    #[test]
    fn deterministic_generator_without_fading() {
        let pos = [[0.0, 0.0], [3.0, 4.0]];
        let params = ChannelModelParams {
            amplitude: 1.0,
            sigma_n: 0.0,
            tau0: T,
            sample_time: T,
            paths: 2,
            speed: 5.0 / (30.0 * T),
            seed: 1,
        };
        let net = generate_network(&pos, &[(0, 1), (1, 0)], &params).unwrap();
        assert_eq!(net.channels().len(), 2);
        for ch in net.channels() {
            let p = ch.paths();
            assert_eq!(p[0].amplitude, 1.0);
            assert!((p[1].amplitude - (-1.0f64).exp()).abs() < 1e-15);
            assert!((p[0].delay - 30.0 * T).abs() < 1e-15);
            assert!((p[1].delay - 31.0 * T).abs() < 1e-15);
        }
    }

    #[test]
    fn fading_produces_negative_coefficients() {
        let pos = random_positions(10, 100.0, 3);
        let conn = geometric_connectivity(&pos, 60.0);
        let params = ChannelModelParams {
            amplitude: 1.0,
            sigma_n: 0.5,
            tau0: T,
            sample_time: T,
            paths: 5,
            speed: speed_for_max_delay(&pos, &conn, T, 30.0).unwrap(),
            seed: 11,
        };
        let net = generate_network(&pos, &conn, &params).unwrap();
        assert!(net.channels().iter().flat_map(|c| c.paths()).any(|p| p.amplitude < 0.0));
        let tau_max = net.channels().iter().map(|c| c.paths()[0].delay).fold(0.0, f64::max);
        assert!((tau_max / T - 30.0).abs() < 1e-9);
    }

    #[test]
    fn crafted_two_path_violates_row_sum_bound() {
        let net = NetworkModel::new(2, vec![two_path()]).unwrap();
        let rep = check_conditions(&net, PI / T, DEFAULT_OMEGA_STEPS).unwrap();
        assert!(rep.all_dc_positive);
        let rb = &rep.receivers[0];
        assert!((rb.worst_ratio.unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(rb.worst_omega.unwrap(), PI / T);
        assert!(!rb.rowsum_bound_holds);
    }

    #[test]
    fn single_positive_paths_hit_ratio_one_exactly() {
        let chans = vec![
            MultipathChannel::single(0, 1, 0.7, 3.0 * T).unwrap(),
            MultipathChannel::single(0, 2, 1.3, 7.0 * T).unwrap(),
            MultipathChannel::single(1, 0, 2.0, 0.5 * T).unwrap(),
        ];
        let net = NetworkModel::new(3, chans).unwrap();
        let rep = check_conditions(&net, PI / T, 257).unwrap();
        for rb in &rep.receivers {
            assert_eq!(rb.worst_ratio, Some(1.0));
            assert!(rb.rowsum_bound_holds);
        }
    }

    #[test]
    fn nonpositive_dc_row_sum_omits_ratio() {
        let ch = MultipathChannel::new(0, 1, vec![Path::new(0.2, 0.0), Path::new(-0.4, T)]).unwrap();
        let net = NetworkModel::new(2, vec![ch]).unwrap();
        let rep = check_conditions(&net, PI / T, 16).unwrap();
        assert!(!rep.all_dc_positive);
        assert_eq!(rep.receivers[0].worst_ratio, None);
        assert!(!rep.receivers[0].rowsum_bound_holds);
        assert!(check_conditions(&net, PI / T, 1).is_err());
    }

    #[test]
    fn network_serde_round_trip_rejects_self_loops() {
        let net = NetworkModel::new(2, vec![two_path()]).unwrap();
        let s = serde_json::to_string(&net).unwrap();
        let back: NetworkModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, net);
        let bad = r#"{"nodes":2,"channels":[{"receiver":1,"transmitter":1,"paths":[{"amplitude":1.0,"delay":0.0}]}]}"#;
        assert!(serde_json::from_str::<NetworkModel>(bad).is_err());
    }

    fn arb_channel() -> impl Strategy<Value = MultipathChannel> {
        prop::collection::vec((-2.0f64..2.0, 0.0f64..1.0), 1..8)
            .prop_map(|ps| MultipathChannel::new(1, 0, ps.into_iter().map(|(a, d)| Path::new(a, d)).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn response_bounded_by_abs_gain(ch in arb_channel(), w in -1e3f64..1e3) {
            prop_assert!(ch.frequency_response(w).norm() <= ch.abs_gain() * (1.0 + 1e-12));
            let dc: f64 = ch.paths().iter().map(|p| p.amplitude).sum();
            prop_assert_eq!(ch.frequency_response(0.0).re, dc);
        }

        #[test]
        fn generator_is_pure(seed in any::<u64>()) {
            let pos = random_positions(5, 10.0, seed);
            let conn = geometric_connectivity(&pos, 8.0);
            let params = ChannelModelParams {
                amplitude: 1.0, sigma_n: 0.5, tau0: T, sample_time: T,
                paths: 3, speed: 1e4, seed,
            };
            let a = generate_network(&pos, &conn, &params).unwrap();
            let b = generate_network(&pos, &conn, &params).unwrap();
            prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }

        #[test]
        fn nested_grid_never_lowers_worst_ratio(ch in arb_channel(), level in 1u32..6) {
            let ch = if ch.dc_gain() > 0.0 { ch } else {
                ch.with_paths(vec![Path::new(1.0, 0.0)])
            };
            let net = NetworkModel::new(2, vec![ch]).unwrap();
            let coarse = check_conditions(&net, 50.0, (1 << level) + 1).unwrap();
            let fine = check_conditions(&net, 50.0, (1 << (level + 1)) + 1).unwrap();
            prop_assert!(fine.receivers[0].worst_ratio.unwrap() >= coarse.receivers[0].worst_ratio.unwrap());
        }
    }
}
