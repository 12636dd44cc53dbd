//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use consensus_core::analysis::{
    characteristic_scale, characteristic_value, consensus_report, rate_empirical, rate_spectral, SpectralOptions,
};
use consensus_core::channel::{
    check_conditions, speed_for_max_delay, ChannelModelParams, MultipathChannel, NetworkModel, Path,
};
use consensus_core::cli::{connected_deployment, Requirement};
use consensus_core::digraph::{build_digraph, is_qsc};
use consensus_core::protocol::{compensate, estimate_gamma, unbiased_pipeline};
use consensus_core::simulator::{quantize_delays, run_batch, simulate, BatchSpec, SimConfig};

use common::{gamma_oracle, random_network, redraw_delays, weighted_mean, RandomNet};

type Check = fn() -> Result<String, String>;

fn link(r: usize, q: usize, a: f64, delay: f64) -> MultipathChannel {
    MultipathChannel::single(r, q, a, delay).unwrap()
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn balanced_pair() -> Result<String, String> {
    let net = NetworkModel::new(2, vec![link(0, 1, 1.0, 0.0), link(1, 0, 1.0, 0.0)]).unwrap();
    let cfg = SimConfig::new(1.0, vec![3.0, 7.0], 1e-2, 5000);
    let start = Instant::now();
    let tr = simulate(&net, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let err = tr.per_node_limit.iter().map(|x| (x - 5.0).abs()).fold(0.0, f64::max);
    let detail = format!(
        "max |limit - 5| = {err:.2e}, converged_at = {:?}, runtime {elapsed:.4} s",
        tr.converged_at
    );
    ensure(err <= 1e-6 && tr.converged() && elapsed < 0.1, detail)
}

fn geometric_prediction() -> Result<String, String> {
    let t = 1e-3;
    let (positions, edges, _) = connected_deployment(10, 100.0, 50.0, 1, Requirement::Sc).map_err(|e| e.to_string())?;
    let speed = speed_for_max_delay(&positions, &edges, t, 30.0).map_err(|e| e.to_string())?;
    let spec = BatchSpec {
        positions,
        connectivity: edges,
        params: ChannelModelParams {
            amplitude: 1.0,
            sigma_n: 0.5,
            tau0: t,
            sample_time: t,
            paths: 5,
            speed,
            seed: 0,
        },
        config: SimConfig::new(20.0, (0..10).map(|i| 0.5 * i as f64 - 1.0).collect(), t, 20000),
    };
    let seeds: Vec<u64> = (1..=10).collect();
    let start = Instant::now();
    let out = run_batch(&spec, &seeds, None)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut converged = 0;
    let mut worst: f64 = 0.0;
    for run in &out.runs {
        let (_, _, report) = run.outcome.as_ref().map_err(|e| format!("seed {}: {e}", run.seed))?;
        if report.converged {
            converged += 1;
            worst = worst.max(report.relative_error.ok_or("network not QSC")?);
        }
    }
    let detail = format!("{converged}/10 converged, worst relative error {worst:.2e}, runtime {elapsed:.2} s");
    ensure(converged >= 9 && worst < 1e-2 && elapsed < 5.0, detail)
}

fn root_value_chain() -> Result<String, String> {
    let t = 1e-2;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lag = || rng.gen_range(0..=20) as f64 * t;
    let net = NetworkModel::new(3, vec![link(1, 0, 1.0, lag()), link(2, 1, 1.0, lag())]).unwrap();
    let tr = simulate(&net, &SimConfig::new(1.0, vec![5.0, 0.0, 0.0], t, 20000)).map_err(|e| e.to_string())?;
    let err = tr.per_node_limit.iter().map(|x| (x - 5.0).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-3, format!("max |limit - 5| = {err:.2e}"))
}

fn non_qsc_clusters() -> Result<String, String> {
    let t = 1e-2;
    let net = NetworkModel::new(3, vec![link(1, 0, 1.0, 2.0 * t), link(1, 2, 1.0, 5.0 * t)]).unwrap();
    let cfg = SimConfig::new(1.0, vec![1.0, 0.0, 4.0], t, 5000);
    let tr = simulate(&net, &cfg).map_err(|e| e.to_string())?;
    let report = consensus_report(&net, &net, &cfg, &tr).map_err(|e| e.to_string())?;
    let min_spread = (0..tr.horizon()).map(|k| tr.spread(k)).fold(f64::INFINITY, f64::min);
    let l = &tr.per_node_limit;
    let detail = format!("limits {l:?}, min spread {min_spread}, qsc {}", report.qsc);
    ensure(
        (l[0] - 1.0).abs() < 1e-9 && (l[2] - 4.0).abs() < 1e-9 && min_spread > 1.0 && !report.qsc,
        detail,
    )
}

fn gamma_estimation() -> Result<String, String> {
    let t = 1e-2;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let spec = RandomNet {
            nodes: 3 + seed as usize,
            density: 0.15,
            max_paths: 2,
            max_lag: 5,
            ..RandomNet::default()
        };
        let net = random_network(100 + seed, &spec, t);
        let cond = check_conditions(&net, PI / t, 1024).unwrap();
        if !(cond.all_dc_positive && cond.all_rowsum_hold) {
            return Err(format!("network {seed} violates the channel conditions"));
        }
        let cfg = SimConfig::new(1.0, vec![0.0; spec.nodes], t, 60000);
        let est = estimate_gamma(&net, &cfg).map_err(|e| format!("network {seed}: {e}"))?;
        let oracle = gamma_oracle(&net);
        let err = est
            .gamma_tilde
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    ensure(
        worst <= 1e-3,
        format!("worst ‖γ̃ - γ/Σγ‖∞ = {worst:.2e} over 5 networks"),
    )
}

fn compensation_delay_invariance() -> Result<String, String> {
    let t = 1e-2;
    let base = random_network(
        60,
        &RandomNet {
            nodes: 6,
            density: 0.2,
            max_paths: 2,
            max_lag: 0,
            strongly_connected: true,
            ..RandomNet::default()
        },
        t,
    );
    let c = vec![1.0, 2.0, 1.0, 0.5, 1.0, 1.5];
    let u = vec![3.0, -1.0, 2.0, 5.0, 0.5, 1.0];
    let cfg = SimConfig::new(1.0, u.clone(), t, 40000).with_weights(c.clone());
    let expected = weighted_mean(&gamma_oracle(&base), &c, &u);
    let mut worst: f64 = 0.0;
    let mut alphas = Vec::new();
    for k in 0..5 {
        let net = redraw_delays(&base, 600 + k, 30, t);
        let comp = compensate(&net, &cfg).map_err(|e| format!("assignment {k}: {e}"))?;
        worst = worst.max((comp.result.ratio - expected).abs() / expected.abs());
        alphas.push(comp.result.alpha_y);
    }
    let lo = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo) / lo.abs().min(hi.abs());
    let detail = format!(
        "worst ratio error {:.3e}%, uncompensated variation {:.1}%",
        worst * 100.0,
        spread * 100.0
    );
    ensure(worst < 5e-3 && spread > 0.05, detail)
}

fn unbiased_pair() -> Result<String, String> {
    let t = 1e-2;
    let net = NetworkModel::new(2, vec![link(1, 0, 2.0, 3.0 * t), link(0, 1, 1.0, t)]).unwrap();
    let cfg = SimConfig::new(1.0, vec![4.0, 0.0], t, 20000);
    let (result, _) = unbiased_pipeline(&net, &cfg, None).map_err(|e| e.to_string())?;
    let s = result.statistic;
    ensure(
        (s - 2.0).abs() <= 0.02 && (s - 8.0 / 3.0).abs() > 0.1,
        format!("pipeline statistic {s}"),
    )
}

fn characteristic_function() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let spec = RandomNet {
            nodes: rng.gen_range(2..=8),
            max_paths: 3,
            ..RandomNet::default()
        };
        let net = random_network(800 + seed, &spec, 1e-2)
            .map_paths(|_, _, p| Path::new(p.amplitude, rng.gen_range(0.0..0.5)));
        if !is_qsc(&build_digraph(&net)) {
            return Err(format!("fixture {seed} is not QSC"));
        }
        let c: Vec<f64> = (0..spec.nodes).map(|_| rng.gen_range(0.5..2.0)).collect();
        let cfg = SimConfig::new(rng.gen_range(0.5..3.0), vec![0.0; spec.nodes], 1e-2, 10).with_weights(c);
        let p0 = characteristic_value(&net, &cfg, Complex64::new(0.0, 0.0)).norm();
        worst = worst.max(p0 / characteristic_scale(&net, &cfg));
    }
    let pair = NetworkModel::new(2, vec![link(0, 1, 1.0, 0.0), link(1, 0, 1.0, 0.0)]).unwrap();
    let cfg = SimConfig::new(1.0, vec![0.0; 2], 1e-2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut hand: f64 = 0.0;
    for _ in 0..5 {
        let s = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        hand = hand.max((characteristic_value(&pair, &cfg, s) - s * (s + 2.0)).norm());
    }
    ensure(
        worst <= 1e-10 && hand <= 1e-10,
        format!("worst relative |p(0)| {worst:.2e}, hand case error {hand:.2e}"),
    )
}

fn rate_cross_validation() -> Result<String, String> {
    let t = 1e-2;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let spec = RandomNet {
            nodes: 3 + (seed as usize % 4),
            density: 0.2,
            max_paths: 2,
            max_lag: 10,
            strongly_connected: seed % 2 == 0,
            ..RandomNet::default()
        };
        let net = random_network(900 + seed, &spec, t);
        let (_, q) = quantize_delays(&net, t);
        assert!(spec.nodes * (q.max_lag + 1) <= 500);
        let u: Vec<f64> = (0..spec.nodes).map(|i| i as f64).collect();
        let cfg = SimConfig::new(1.0, u, t, 40000);
        let tr = simulate(&net, &cfg).map_err(|e| e.to_string())?;
        let report = consensus_report(&net, &net, &cfg, &tr).map_err(|e| e.to_string())?;
        let emp = rate_empirical(&tr, report.alpha_theory.unwrap()).map_err(|e| format!("system {seed}: {e}"))?;
        let spec_rate = rate_spectral(&net, &cfg, SpectralOptions::default())
            .map_err(|e| format!("system {seed}: {e}"))?
            .decay_rate;
        worst = worst.max((emp - spec_rate).abs() / spec_rate);
    }
    let pair = NetworkModel::new(2, vec![link(0, 1, 1.0, 0.0), link(1, 0, 1.0, 0.0)]).unwrap();
    let cfg = SimConfig::new(1.0, vec![3.0, 7.0], t, 5000);
    let tr = simulate(&pair, &cfg).map_err(|e| e.to_string())?;
    let emp = rate_empirical(&tr, 5.0).map_err(|e| e.to_string())?;
    let spec_rate = rate_spectral(&pair, &cfg, SpectralOptions::default())
        .map_err(|e| e.to_string())?
        .decay_rate;
    let detail = format!(
        "worst disagreement {:.2}%; pair: empirical {emp:.4}, spectral {spec_rate:.4}",
        worst * 100.0
    );
    ensure(
        worst <= 0.15 && (emp - 2.0).abs() <= 0.1 && (spec_rate - 2.0).abs() <= 0.1,
        detail,
    )
}

fn condition_checker() -> Result<String, String> {
    let t = 1e-2;
    let crafted = MultipathChannel::new(0, 1, vec![Path::new(1.0, 0.0), Path::new(-0.5, t)]).unwrap();
    let net = NetworkModel::new(2, vec![crafted, link(1, 0, 1.0, 0.0)]).unwrap();
    let rep = check_conditions(&net, PI / t, 1024).map_err(|e| e.to_string())?;
    let r0 = &rep.receivers[0];
    let ratio = r0.worst_ratio.ok_or("no ratio")?;
    let omega = r0.worst_omega.ok_or("no omega")?;
    let crafted_ok = rep.all_dc_positive && (ratio - 3.0).abs() <= 1e-6 && (omega - PI / t).abs() <= 1e-9;

    let mut single_ok = true;
    for seed in 0..10 {
        let spec = RandomNet {
            nodes: 6,
            max_paths: 1,
            max_lag: 30,
            ..RandomNet::default()
        };
        let net = random_network(1000 + seed, &spec, t);
        let rep = check_conditions(&net, PI / t, 1024).map_err(|e| e.to_string())?;
        single_ok &= rep.receivers.iter().all(|r| r.worst_ratio.is_none_or(|x| x == 1.0));
    }
    ensure(
        crafted_ok && single_ok,
        format!(
            "crafted: dc_positive {}, worst ratio {ratio} at ω = {omega}; single-path ratios exactly 1: {single_ok}",
            rep.all_dc_positive
        ),
    )
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = dir.path().join("scenario.json");
    let text = r#"{
        "experiment": "simulate",
        "topology": {"generated": {
            "positions": {"random": {"count": 6, "side": 100.0, "seed": 2, "require": "sc"}},
            "connectivity": {"radius": 60.0},
            "model": {"amplitude": 1.0, "sigma_n": 0.5, "paths": 3, "max_delay_samples": 10}
        }},
        "sim": {"coupling_gain": 5.0, "sample_time": 0.001, "horizon": 4000},
        "inputs": {"u": [1, 2, 3, 4, 5, 6]}
    }"#;
    std::fs::write(&scenario, text).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_consensus-sim"))
            .args(["simulate", "--seed", "17", "--config"])
            .arg(&scenario)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("run {run} exited with {status}"));
        }
        let csv = std::fs::read(out.join("trajectory.csv")).map_err(|e| e.to_string())?;
        let mut summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("summary.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        summary
            .as_object_mut()
            .ok_or("summary is not an object")?
            .remove("timings");
        outputs.push((csv, summary));
    }
    let same_csv = outputs[0].0 == outputs[1].0;
    let same_summary = outputs[0].1 == outputs[1].1;
    ensure(
        same_csv && same_summary,
        format!(
            "trajectory.csv identical: {same_csv} ({} bytes), summary identical: {same_summary}",
            outputs[0].0.len()
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(u32, &str, Check); 11] = [
        (1, "balanced zero-delay average consensus", balanced_pair),
        (
            2,
            "consensus value prediction on random geometric networks",
            geometric_prediction,
        ),
        (3, "root-value consensus on a delayed chain", root_value_chain),
        (4, "separated clusters without a spanning tree", non_qsc_clusters),
        (5, "left eigenvector estimation from consensus runs", gamma_estimation),
        (
            6,
            "delay invariance of ratio compensation",
            compensation_delay_invariance,
        ),
        (7, "unbiased pipeline on an unbalanced pair", unbiased_pair),
        (
            8,
            "characteristic function at the origin and hand case",
            characteristic_function,
        ),
        (9, "empirical versus spectral convergence rate", rate_cross_validation),
        (10, "frequency-domain condition checker", condition_checker),
        (11, "byte-identical reruns", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
