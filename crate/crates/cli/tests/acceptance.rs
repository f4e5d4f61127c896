//! Acceptance run: one PASS/FAIL line per criterion, then a single assert.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subboost::adapter::{build_r, delta_w, make_projections, select_window, AdapterConfig, AdapterState, Basis};
use subboost::bounds::{complexity_term, default_grid, evaluate_bound, BoundInputs, DEFAULT_DELTA, DEFAULT_GRID_POINTS};
use subboost::data::{gaussian_mixture, SyntheticSpec};
use subboost::grpo::{group_advantages, RewardGroup};
use subboost::linalg::{numerical_rank, rank_measures, svd, Matrix, DEFAULT_EPS_RANK, DEFAULT_RANK_TOL};
use subboost::model::{xent_loss_and_grads, FrozenModel};
use subboost_cli::config::ExperimentConfig;
use subboost_cli::experiment::{run_experiment, ArmOutcome, CURVES_FILE, ROUNDS_FILE};

const DESK: &str = include_str!("../../../configs/desk.toml");
const SMOKE: &str = include_str!("../../../configs/smoke.toml");

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn report(o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{} [{:>2}] {} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.title,
        o.elapsed.as_secs_f64(),
        o.detail
    );
}

fn timed(id: u32, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    let o = Outcome {
        id,
        title,
        pass,
        detail,
        elapsed: start.elapsed(),
    };
    report(&o);
    o
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Sum of `rounds` rank-`r` deltas on a random 64×64 base with random
/// nonzero `v` in every round.
fn cumulative_delta(r: usize, rounds: usize, basis: Basis, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = svd(&random_matrix(64, 64, &mut rng)).unwrap();
    let cfg = AdapterConfig {
        rank: r,
        proj_dim: 3,
        groups: 1,
        basis,
        seed,
        ..AdapterConfig::default()
    };
    let p = make_projections(&cfg, 0);
    let mut total = Matrix::zeros(64, 64);
    for t in 1..=rounds {
        let v: Vec<f64> = (0..3)
            .map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let window = select_window(&f, basis, r, t).unwrap();
        total.add_assign(&delta_w(&window, &build_r(&v, &p).unwrap()).unwrap()).unwrap();
    }
    total
}

fn criterion_rank_growth() -> (bool, String) {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut checked = 0;
    for (i, r) in [1usize, 2, 4].into_iter().enumerate() {
        for rounds in [1, 5, 32 / r, 64 / r] {
            let got = numerical_rank(&cumulative_delta(r, rounds, Basis::Rotate, 100 + i as u64), DEFAULT_RANK_TOL).unwrap();
            checked += 1;
            if got != r * rounds {
                bad.push(format!("r={r} T={rounds}: rank {got}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        bad.is_empty() && secs < 10.0,
        format!("{checked} (r, T) cases, mismatches {bad:?}, {secs:.2}s"),
    )
}

fn criterion_top_confinement() -> (bool, String) {
    let mut worst = Vec::new();
    let mut pass = true;
    for (i, r) in [1usize, 2, 4].into_iter().enumerate() {
        let d = cumulative_delta(r, 20, Basis::Top, 200 + i as u64);
        let num = numerical_rank(&d, DEFAULT_RANK_TOL).unwrap();
        let eps = rank_measures(&d, DEFAULT_EPS_RANK).unwrap().eps_rank;
        pass &= num <= r && eps <= r + 2;
        worst.push(format!("r={r}: numerical {num}, eps {eps}"));
    }
    (pass, worst.join("; "))
}

fn criterion_bound_arithmetic() -> (bool, String) {
    let a = complexity_term(115.6, 0.81, 2.6, 50_000).unwrap();
    let b = complexity_term(1.0, 0.2, 1.0, 7_500).unwrap();
    (
        (a - 0.322).abs() <= 0.002 && (b - 0.0046).abs() <= 0.0005,
        format!("{a:.5} and {b:.6}"),
    )
}

fn criterion_gradients() -> (bool, String) {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut count = 0;
    for mlp in [false, true] {
        for inst in 0..20u64 {
            let seed = 1000 + inst;
            let data = gaussian_mixture(&SyntheticSpec {
                classes: 4,
                dim: 10,
                n: 64,
                separation: 2.0,
                noise: 1.0,
                seed,
            })
            .unwrap();
            let model = if mlp {
                FrozenModel::mlp(10, 12, 4, seed).unwrap()
            } else {
                FrozenModel::linear_classifier(10, 4, seed).unwrap()
            };
            let cfg = AdapterConfig {
                rank: 2,
                proj_dim: 3,
                groups: model.num_adapted(),
                seed,
                ..AdapterConfig::default()
            };
            let round = 1 + (inst as usize % 2);
            let windows = model
                .adapted_weights()
                .iter()
                .map(|w| select_window(&svd(w).unwrap(), Basis::Rotate, 2, round).unwrap())
                .collect();
            let mut adapter = AdapterState::new(&cfg, windows).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..adapter.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
            adapter.set_v_flat(&v).unwrap();
            let batch: Vec<usize> = (0..16).map(|_| rng.random_range(0..64)).collect();
            let analytic = xent_loss_and_grads(&model, &data, &batch, Some(&adapter), false)
                .unwrap()
                .grad_v_flat();
            let mut loss_at = |v: &[f64]| {
                adapter.set_v_flat(v).unwrap();
                xent_loss_and_grads(&model, &data, &batch, Some(&adapter), false).unwrap().loss
            };
            let numeric: Vec<f64> = (0..v.len())
                .map(|i| {
                    let mut plus = v.clone();
                    let mut minus = v.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
                })
                .collect();
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = subboost::linalg::norm2(&analytic).max(subboost::linalg::norm2(&numeric)).max(1e-12);
            worst = worst.max(diff / scale);
            count += 1;
        }
    }
    (worst < 1e-5, format!("{count} instances, worst relative error {worst:.2e}"))
}

fn criterion_merge() -> (bool, String) {
    let mut worst = 0.0f64;
    for mlp in [false, true] {
        let model = if mlp {
            FrozenModel::mlp(32, 24, 5, 9).unwrap()
        } else {
            FrozenModel::linear_classifier(32, 5, 9).unwrap()
        };
        let cfg = AdapterConfig {
            rank: 2,
            proj_dim: 3,
            groups: model.num_adapted(),
            seed: 9,
            ..AdapterConfig::default()
        };
        let windows = model
            .adapted_weights()
            .iter()
            .map(|w| select_window(&svd(w).unwrap(), Basis::Rotate, 2, 2).unwrap())
            .collect();
        let mut adapter = AdapterState::new(&cfg, windows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..adapter.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        adapter.set_v_flat(&v).unwrap();
        let mut merged = model.clone();
        merged.merge_adapter(&adapter).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
            let live = model.forward(&x, 0, Some(&adapter)).unwrap();
            let post = merged.forward(&x, 0, None).unwrap();
            for (a, b) in live.logits.iter().zip(&post.logits) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (worst <= 1e-12, format!("max |Δlogit| {worst:.2e} over 200 inputs"))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_desk(rotate: &ArmOutcome, top: &ArmOutcome, elapsed: Duration) -> (bool, String) {
    let eps = |a: &ArmOutcome| a.run.reports.last().map_or(0, |r| r.rank_measures.eps_rank);
    let failures = |m: &[f64]| m.iter().filter(|x| **x <= 0.0).count();
    let mut pass = eps(rotate) >= 5 * eps(top).max(1) && elapsed < Duration::from_secs(600);
    let mut parts = vec![format!("eps-rank rotate {} vs top {}", eps(rotate), eps(top))];
    for arm in [rotate, top] {
        let v: Vec<f64> = arm.run.reports.iter().map(|r| r.v_norm).collect();
        let (initial, last) = (failures(&arm.run.margin_snapshots[0]), failures(arm.run.final_margins()));
        let ok = v.len() == 20 && last < initial && mean(&v[15..20]) < mean(&v[0..5]);
        pass &= ok;
        parts.push(format!(
            "{}: failures {initial} -> {last}, mean |v| rounds 1-5 {:.4} vs 16-20 {:.4}",
            arm.name,
            mean(&v[..5.min(v.len())]),
            if v.len() >= 20 { mean(&v[15..20]) } else { f64::NAN }
        ));
    }
    parts.push(format!("{:.0}s", elapsed.as_secs_f64()));
    (pass, parts.join("; "))
}

/// Flips recomputed from consecutive margin snapshots, checked against each
/// round's M·ε·H.
fn criterion_regressions(arms: &[&ArmOutcome]) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for arm in arms {
        let mut flips = 0;
        let mut violations = 0;
        for (t, rep) in arm.run.reports.iter().enumerate() {
            let (before, after) = (&arm.run.margin_snapshots[t], &arm.run.margin_snapshots[t + 1]);
            for (b, a) in before.iter().zip(after) {
                if *b > 0.0 && *a <= 0.0 {
                    flips += 1;
                    if *b >= rep.regression_threshold || b.is_nan() {
                        violations += 1;
                    }
                }
            }
            violations += rep.regression_violations;
        }
        let rates: Vec<f64> = arm.run.reports.iter().map(|r| r.regression_rate).collect();
        let mean_rate = mean(&rates);
        pass &= violations == 0 && mean_rate < 0.02;
        parts.push(format!(
            "{}: {flips} flips, {violations} violations, mean rate {:.3}%",
            arm.name,
            100.0 * mean_rate
        ));
    }
    (pass, parts.join("; "))
}

fn oracle_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mut mean = 0.0;
    for r in rewards {
        mean += r;
    }
    mean /= n;
    let mut ss = 0.0;
    for r in rewards {
        ss += (r - mean) * (r - mean);
    }
    let std = (ss / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

fn criterion_advantages() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut constant = 0;
    for i in 0..1000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = match i % 4 {
            0 => {
                constant += 1;
                vec![rng.random_range(-5.0..5.0); g]
            }
            1 => (0..g).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect(),
            _ => (0..g).map(|_| rng.random_range(-10.0..10.0)).collect(),
        };
        let got = group_advantages(&RewardGroup::new(rewards.clone()).unwrap());
        let want = oracle_advantages(&rewards, 1e-4);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst <= 1e-10, format!("1000 groups ({constant} constant), max deviation {worst:.2e}"))
}

fn criterion_bound(arm: &ArmOutcome) -> (bool, String) {
    let margins = arm.run.final_margins().to_vec();
    let inputs = BoundInputs {
        margins: margins.clone(),
        b_total: arm.run.b_total(),
        x: arm.run.feature_norm(),
        delta: DEFAULT_DELTA,
    };
    let grid = default_grid(&margins, DEFAULT_GRID_POINTS).unwrap();
    let b = evaluate_bound(&inputs, &grid).unwrap();
    let worst = b
        .points
        .iter()
        .map(|p| (p.bound - (p.margin_term + p.complexity_term + p.confidence_term)).abs())
        .fold(0.0, f64::max);
    let s = b.star();
    (
        b.bound_at_star < 1.0 && !b.vacuous && worst <= 1e-12,
        format!(
            "{}: theta* {:.3}, bound {:.4} = margin {:.4} + complexity {:.4} + confidence {:.4} (B {:.3}, X {:.2}), identity error {worst:.1e}",
            arm.name, b.theta_star, b.bound_at_star, s.margin_term, s.complexity_term, s.confidence_term, inputs.b_total, inputs.x
        ),
    )
}

fn run_in_pool(cfg: &ExperimentConfig, out: &Path, threads: usize) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_experiment(cfg, out).unwrap());
}

fn criterion_determinism() -> (bool, String) {
    let cfg = ExperimentConfig::parse(SMOKE).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_in_pool(&cfg, a.path(), 1);
    run_in_pool(&cfg, b.path(), 3);
    let mut compared = 0;
    let mut differing = Vec::new();
    for arm in cfg.resolve_arms() {
        for file in [CURVES_FILE, ROUNDS_FILE] {
            let rel = Path::new(&cfg.name).join(&arm.name).join(file);
            let x = std::fs::read(a.path().join(&rel)).unwrap();
            let y = std::fs::read(b.path().join(&rel)).unwrap();
            compared += 1;
            if x != y || x.is_empty() {
                differing.push(rel.display().to_string());
            }
        }
    }
    (
        differing.is_empty(),
        format!("{compared} files compared across 1- and 3-thread runs, differing {differing:?}"),
    )
}

#[test]
fn acceptance() {
    let _ = writeln!(std::io::stdout().lock());
    let mut results = vec![
        timed(1, "exact rank growth", criterion_rank_growth),
        timed(2, "top-basis confinement", criterion_top_confinement),
        timed(3, "bound arithmetic", criterion_bound_arithmetic),
        timed(4, "adapter gradient vs finite differences", criterion_gradients),
        timed(5, "merge equivalence", criterion_merge),
    ];

    let desk = ExperimentConfig::parse(DESK).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let arms = run_experiment(&desk, dir.path()).unwrap();
    let elapsed = start.elapsed();
    let rotate = arms.iter().find(|a| a.name == "rotate").unwrap();
    let top = arms.iter().find(|a| a.name == "top").unwrap();

    results.push(timed(6, "desk-scale rotate vs top dynamics", || criterion_desk(rotate, top, elapsed)));
    results.push(timed(7, "regression audit", || criterion_regressions(&[rotate, top])));
    results.push(timed(8, "group advantage oracle", criterion_advantages));
    results.push(timed(9, "non-vacuous margin bound", || criterion_bound(rotate)));
    results.push(timed(10, "determinism", criterion_determinism));

    let failed: Vec<u32> = results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let _ = writeln!(
        std::io::stdout().lock(),
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
