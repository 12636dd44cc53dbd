use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize_delays, simulate, SimConfig, Trajectory};
use crate::analysis::{consensus_report, ConsensusReport};
use crate::channel::{generate_network, ChannelModelParams, NetworkModel};

/// A fixed deployment whose channels are redrawn per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub positions: Vec<[f64; 2]>,
    pub connectivity: Vec<(usize, usize)>,
    /// Channel model; its `seed` is replaced by each run's seed.
    pub params: ChannelModelParams,
    pub config: SimConfig,
}

#[derive(Debug, Clone)]
pub struct BatchRun {
    pub seed: u64,
    pub outcome: Result<(NetworkModel, Trajectory, ConsensusReport), String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub runs: usize,
    pub failed: usize,
    pub converged: usize,
    /// Over successful runs, of the node-averaged empirical limit.
    pub mean_limit: f64,
    pub std_limit: f64,
    pub mean_relative_error: Option<f64>,
    pub max_relative_error: Option<f64>,
    pub mean_converged_at: Option<f64>,
    pub std_converged_at: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub runs: Vec<BatchRun>,
    pub stats: BatchStats,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

fn run_one(spec: &BatchSpec, seed: u64) -> Result<(NetworkModel, Trajectory, ConsensusReport), String> {
    let params = ChannelModelParams {
        seed,
        ..spec.params.clone()
    };
    let network = generate_network(&spec.positions, &spec.connectivity, &params).map_err(|e| e.to_string())?;
    let (quantized, _) = quantize_delays(&network, spec.config.sample_time);
    let trajectory = simulate(&quantized, &spec.config).map_err(|e| e.to_string())?;
    let report = consensus_report(&network, &quantized, &spec.config, &trajectory).map_err(|e| e.to_string())?;
    Ok((network, trajectory, report))
}

/// Independent realizations, one per seed, run on up to `threads` workers
/// (all available when `None`). Results keep the order of `seeds`; a failed
/// run is recorded and the batch continues.
pub fn run_batch(spec: &BatchSpec, seeds: &[u64], threads: Option<usize>) -> Result<BatchOutcome, String> {
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err("batch seeds must be distinct".into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| e.to_string())?;
    let runs: Vec<BatchRun> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| BatchRun {
                seed,
                outcome: run_one(spec, seed),
            })
            .collect()
    });

    let ok: Vec<&ConsensusReport> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|o| &o.2))
        .collect();
    let limits: Vec<f64> = ok.iter().map(|r| r.mean_empirical).collect();
    let (mean_limit, std_limit) = mean_std(&limits);
    let errors: Vec<f64> = ok
        .iter()
        .filter(|r| r.converged)
        .filter_map(|r| r.relative_error)
        .collect();
    let steps: Vec<f64> = ok.iter().filter_map(|r| r.converged_at.map(|k| k as f64)).collect();
    let (ms, ss) = mean_std(&steps);
    let stats = BatchStats {
        runs: runs.len(),
        failed: runs.len() - ok.len(),
        converged: ok.iter().filter(|r| r.converged).count(),
        mean_limit,
        std_limit,
        mean_relative_error: (!errors.is_empty()).then(|| mean_std(&errors).0),
        max_relative_error: errors.iter().copied().reduce(f64::max),
        mean_converged_at: (!steps.is_empty()).then_some(ms),
        std_converged_at: (!steps.is_empty()).then_some(ss),
    };
    Ok(BatchOutcome { runs, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BatchSpec {
        let t = 1e-2;
        BatchSpec {
            positions: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            connectivity: vec![(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)],
            params: ChannelModelParams {
                amplitude: 1.0,
                sigma_n: 0.3,
                tau0: t,
                sample_time: t,
                paths: 2,
                speed: 1.0 / (5.0 * t),
                seed: 0,
            },
            config: SimConfig::new(1.0, vec![1.0, 2.0, 3.0], t, 3000),
        }
    }

    #[test]
    fn empty_and_single() {
        let s = spec();
        let out = run_batch(&s, &[], Some(1)).unwrap();
        assert!(out.runs.is_empty());
        assert_eq!(out.stats.runs, 0);

        let out = run_batch(&s, &[9], Some(1)).unwrap();
        let (net, tr, _) = out.runs[0].outcome.as_ref().unwrap();
        let params = ChannelModelParams {
            seed: 9,
            ..s.params.clone()
        };
        let direct = generate_network(&s.positions, &s.connectivity, &params).unwrap();
        assert_eq!(net, &direct);
        let (q, _) = quantize_delays(&direct, s.config.sample_time);
        assert_eq!(tr, &simulate(&q, &s.config).unwrap());
    }

    #[test]
    fn seeds_draw_distinct_channels() {
        let s = spec();
        let seeds: Vec<u64> = (0..10).collect();
        let out = run_batch(&s, &seeds, Some(4)).unwrap();
        let nets: Vec<String> = out
            .runs
            .iter()
            .map(|r| serde_json::to_string(&r.outcome.as_ref().unwrap().0).unwrap())
            .collect();
        let distinct: BTreeSet<&String> = nets.iter().collect();
        assert_eq!(distinct.len(), 10);
        let again = run_batch(&s, &seeds, Some(2)).unwrap();
        assert_eq!(again.stats, out.stats);
        assert!(run_batch(&s, &[1, 1], None).is_err());
    }
}
