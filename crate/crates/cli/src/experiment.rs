//! `run`: dataset, base model, then every arm in order with shared splits.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use subboost::adapter::{select_window, AdapterState, Basis};
use subboost::boosting::{run_with, BoostRun, RoundReport};
use subboost::bounds::{default_grid, estimate_x, evaluate_bound, BoundInputs, BoundReport, DEFAULT_DELTA, DEFAULT_GRID_POINTS};
use subboost::checkpoint;
use subboost::data::{gaussian_mixture, LabeledDataset, Split};
use subboost::linalg::svd;
use subboost::model::{pretrain, FrozenModel};

use crate::config::{ExperimentConfig, ResolvedArm};
use crate::error::CliError;

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const MARGINS_FILE: &str = "margins.txt";
pub const BOUND_CURVE_FILE: &str = "bound_curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bstl";
pub const SUMMARY_FILE: &str = "summary.json";

const CURVES_HEADER: &str =
    "round,train_acc,test_acc,failures,v_norm,cum_v_norm,part_ratio,eps_rank,delta_frob,regressions";

/// Everything shared by the arms of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub split_hash: String,
    /// Pre-trained, then frozen.
    pub base: FrozenModel,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let data = match (&cfg.data.csv, cfg.synthetic_spec()) {
        (Some(path), _) => LabeledDataset::read_csv(path)?,
        (None, Some(spec)) => gaussian_mixture(&spec).map_err(|e| CliError::Usage(format!("data.synthetic: {e}")))?,
        (None, None) => unreachable!("validated"),
    };
    let split = Split::new(data.len(), cfg.data.train_fraction, cfg.data.test_fraction, cfg.split_seed())
        .map_err(|e| CliError::Usage(format!("data: {e}")))?;
    let train = data.subset(&split.train);
    let test = (!split.test.is_empty()).then(|| data.subset(&split.test));
    let mut base = FrozenModel::build(cfg.model.kind, data.dim(), cfg.model.hidden, data.num_classes(), cfg.model_seed())
        .map_err(|e| CliError::Usage(format!("model: {e}")))?;
    let losses = pretrain(&mut base, &train, &cfg.pretrain_config())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        info!("pretrain: loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    Ok(Prepared {
        train,
        test,
        split_hash: split.hash(),
        base,
    })
}

/// Derived quantities written next to the run artifacts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub split_hash: String,
    pub rounds_run: usize,
    pub terminated_early: bool,
    pub initial_train_accuracy: f64,
    pub final_train_accuracy: f64,
    pub initial_test_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub initial_failures: usize,
    pub final_failures: usize,
    pub b_total: f64,
    /// Max over rounds of the pre-merge feature norm.
    pub x_round_frozen: f64,
    /// Same features evaluated at the final merged weights; absent when the
    /// top basis is recomputed per round.
    pub x_final_weights: Option<f64>,
    pub mean_regression_rate: f64,
    pub bound: Option<BoundReport>,
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub run: BoostRun,
    pub summary: ArmSummary,
}

/// Runs every arm and writes its artifacts under `out/<name>/<arm>/`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ArmOutcome>, CliError> {
    let prepared = prepare(cfg)?;
    let arms = cfg.resolve_arms();
    for arm in &arms {
        arm.boost
            .check_capacity(&prepared.base)
            .map_err(|e| CliError::Usage(format!("arm {}: {e}", arm.name)))?;
        if arm.boost.two_phase && !prepared.base.has_head() {
            return Err(CliError::Usage(format!(
                "arm {}: two_phase needs a model with a head (model.kind = \"mlp\")",
                arm.name
            )));
        }
    }
    let root = out.join(&cfg.name);
    arms.iter()
        .map(|arm| run_arm(&prepared, arm, &root.join(&arm.name)))
        .collect()
}

pub fn run_arm(prepared: &Prepared, arm: &ResolvedArm, dir: &Path) -> Result<ArmOutcome, CliError> {
    fs::create_dir_all(dir)?;
    info!("arm {}: writing to {}", arm.name, dir.display());
    let mut rounds = BufWriter::new(File::create(dir.join(ROUNDS_FILE))?);
    rounds.flush()?;
    let mut curves = File::create(dir.join(CURVES_FILE))?;
    writeln!(curves, "{CURVES_HEADER}")?;
    drop(curves);
    let mut curves = BufWriter::new(OpenOptions::new().append(true).open(dir.join(CURVES_FILE))?);

    let mut on_round = |report: &RoundReport| -> subboost::Result<()> {
        serde_json::to_writer(&mut rounds, report)?;
        rounds.write_all(b"\n")?;
        rounds.flush()?;
        writeln!(curves, "{}", curve_row(report))?;
        curves.flush()?;
        Ok(())
    };
    let run = run_with(
        prepared.base.clone(),
        &prepared.train,
        prepared.test.as_ref(),
        &arm.boost,
        &prepared.split_hash,
        &mut on_round,
    )
    .map_err(|e| CliError::Failed(format!("arm {}: {e}", arm.name)))?;

    let mut margins = BufWriter::new(File::create(dir.join(MARGINS_FILE))?);
    for m in run.final_margins() {
        writeln!(margins, "{m}")?;
    }
    margins.flush()?;
    write_bound_curve(&run, &dir.join(BOUND_CURVE_FILE))?;
    checkpoint::save(&run, &dir.join(CHECKPOINT_FILE))?;

    let summary = summarize(prepared, arm, &run)?;
    let mut f = File::create(dir.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    Ok(ArmOutcome {
        name: arm.name.clone(),
        dir: dir.to_path_buf(),
        run,
        summary,
    })
}

pub fn curve_row(r: &RoundReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.round,
        r.train_accuracy,
        r.test_accuracy.map_or(String::new(), |a| a.to_string()),
        r.failure_count,
        r.v_norm,
        r.cumulative_v_norm,
        r.rank_measures.participation_ratio,
        r.rank_measures.eps_rank,
        r.delta_frobenius,
        r.regressions
    )
}

/// Bound at the default grid for the margins, `B` and `X` seen so far.
pub fn bound_for(margins: &[f64], b_total: f64, x: f64) -> Result<Option<BoundReport>, CliError> {
    if margins.is_empty() || !margins.iter().any(|m| *m > 0.0) {
        return Ok(None);
    }
    let grid = default_grid(margins, DEFAULT_GRID_POINTS)?;
    let inputs = BoundInputs {
        margins: margins.to_vec(),
        b_total,
        x,
        delta: DEFAULT_DELTA,
    };
    Ok(Some(evaluate_bound(&inputs, &grid)?))
}

fn write_bound_curve(run: &BoostRun, path: &Path) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "round,theta_star,margin_term,complexity_term,confidence_term,bound,vacuous")?;
    let mut x = 0.0f64;
    for (i, report) in run.reports.iter().enumerate() {
        x = x.max(report.feature_norm);
        match bound_for(&run.margin_snapshots[i + 1], report.cumulative_v_norm, x)? {
            Some(b) => {
                let s = b.star();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    report.round, s.theta, s.margin_term, s.complexity_term, s.confidence_term, s.bound, b.vacuous
                )?;
            }
            None => warn!("round {}: no positive margin, bound skipped", report.round),
        }
    }
    w.flush()?;
    Ok(())
}

/// Round adapters rebuilt from the base SVD (their `v` does not matter).
fn round_adapters(base: &FrozenModel, arm: &ResolvedArm, rounds: usize) -> Result<Vec<AdapterState>, CliError> {
    let factors = base
        .adapted_weights()
        .iter()
        .map(|w| svd(w))
        .collect::<subboost::Result<Vec<_>>>()?;
    (1..=rounds)
        .map(|t| {
            let windows = factors
                .iter()
                .map(|f| select_window(f, arm.boost.adapter.basis, arm.boost.adapter.rank, t))
                .collect::<subboost::Result<Vec<_>>>()?;
            Ok(AdapterState::new(&arm.boost.adapter, windows)?)
        })
        .collect()
}

fn summarize(prepared: &Prepared, arm: &ResolvedArm, run: &BoostRun) -> Result<ArmSummary, CliError> {
    let failures = |margins: &[f64]| margins.iter().filter(|m| **m <= 0.0).count();
    let x_round_frozen = run.feature_norm();
    let recomputed = arm.boost.adapter.basis == Basis::Top && arm.boost.adapter.recompute_top;
    let x_final_weights = if recomputed || run.reports.is_empty() {
        None
    } else {
        let adapters = round_adapters(&prepared.base, arm, run.reports.len())?;
        Some(estimate_x(&run.model, &prepared.train, &adapters)?)
    };
    let mean_regression_rate = if run.reports.is_empty() {
        0.0
    } else {
        run.reports.iter().map(|r| r.regression_rate).sum::<f64>() / run.reports.len() as f64
    };
    let last = run.reports.last();
    Ok(ArmSummary {
        arm: arm.name.clone(),
        split_hash: run.split_hash.clone(),
        rounds_run: run.reports.len(),
        terminated_early: run.terminated_early,
        initial_train_accuracy: run.initial_train_accuracy,
        final_train_accuracy: last.map_or(run.initial_train_accuracy, |r| r.train_accuracy),
        initial_test_accuracy: run.initial_test_accuracy,
        final_test_accuracy: last.map_or(run.initial_test_accuracy, |r| r.test_accuracy),
        initial_failures: failures(&run.margin_snapshots[0]),
        final_failures: failures(run.final_margins()),
        b_total: run.b_total(),
        x_round_frozen,
        x_final_weights,
        mean_regression_rate,
        bound: bound_for(run.final_margins(), run.b_total(), x_round_frozen)?,
    })
}
