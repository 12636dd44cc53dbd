//! Shared fixtures for the integration tests: random networks and an
//! SVD-based reference for the left null vector of the Laplacian.
#![allow(dead_code)]

use consensus_core::channel::{MultipathChannel, NetworkModel, Path};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomNet {
    pub nodes: usize,
    /// Extra arcs beyond the spanning structure, as a fraction of all pairs.
    pub density: f64,
    pub max_paths: usize,
    pub max_lag: usize,
    pub amplitude: (f64, f64),
    pub strongly_connected: bool,
}

impl Default for RandomNet {
    fn default() -> Self {
        Self {
            nodes: 5,
            density: 0.2,
            max_paths: 2,
            max_lag: 5,
            amplitude: (0.5, 1.5),
            strongly_connected: false,
        }
    }
}

/// `(receiver, transmitter)` pairs containing a random spanning tree rooted
/// at a random node (plus a Hamiltonian cycle when strongly connected).
pub fn random_arcs(rng: &mut ChaCha8Rng, spec: &RandomNet) -> Vec<(usize, usize)> {
    let n = spec.nodes;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut arcs = std::collections::BTreeSet::new();
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        arcs.insert((order[k], parent));
    }
    if spec.strongly_connected && n > 1 {
        for k in 0..n {
            arcs.insert((order[(k + 1) % n], order[k]));
        }
    }
    for r in 0..n {
        for q in 0..n {
            if r != q && rng.gen_bool(spec.density) {
                arcs.insert((r, q));
            }
        }
    }
    arcs.into_iter().collect()
}

/// Network with positive path amplitudes and delays on the `sample_time`
/// grid. Every channel satisfies the dc and row-sum conditions.
pub fn random_network(seed: u64, spec: &RandomNet, sample_time: f64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arcs = random_arcs(&mut rng, spec);
    let channels = arcs
        .into_iter()
        .map(|(r, q)| {
            let count = rng.gen_range(1..=spec.max_paths);
            let paths = (0..count)
                .map(|_| {
                    Path::new(
                        rng.gen_range(spec.amplitude.0..spec.amplitude.1),
                        rng.gen_range(0..=spec.max_lag) as f64 * sample_time,
                    )
                })
                .collect();
            MultipathChannel::new(r, q, paths).unwrap()
        })
        .collect();
    NetworkModel::new(spec.nodes, channels).unwrap()
}

/// Same channels with every delay redrawn uniformly on `0..=max_lag` samples.
pub fn redraw_delays(network: &NetworkModel, seed: u64, max_lag: usize, sample_time: f64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    network.map_paths(|_, _, p| Path::new(p.amplitude, rng.gen_range(0..=max_lag) as f64 * sample_time))
}

/// `γ / Σγ` from the right singular vector of `Lᵀ` with the smallest
/// singular value.
pub fn gamma_oracle(network: &NetworkModel) -> Vec<f64> {
    let n = network.nodes();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for c in network.channels() {
        let (r, q, g) = (c.receiver(), c.transmitter(), c.dc_gain());
        l[(r, q)] -= g;
        l[(r, r)] += g;
    }
    let svd = l.transpose().svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let v: Vec<f64> = v_t.row(k).iter().copied().collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// `Σγ_i c_i u_i / Σγ_i c_i`.
pub fn weighted_mean(gamma: &[f64], c: &[f64], u: &[f64]) -> f64 {
    let num: f64 = (0..gamma.len()).map(|i| gamma[i] * c[i] * u[i]).sum();
    let den: f64 = (0..gamma.len()).map(|i| gamma[i] * c[i]).sum();
    num / den
}
