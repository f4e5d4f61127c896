//! `gen-data`, `rank-audit`, `bound-eval` and `advantage`.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use subboost::boosting::{aggregate_measures, BoostRun, RoundReport};
use subboost::bounds::{default_grid, evaluate_bound, BoundInputs, BoundReport};
use subboost::checkpoint;
use subboost::data::{gaussian_mixture, SyntheticSpec};
use subboost::grpo::{group_advantages, RewardGroup};
use subboost::linalg::{numerical_rank, rank_measures, Matrix, RankMeasures, DEFAULT_RANK_TOL};

use crate::error::CliError;
use crate::experiment::{CHECKPOINT_FILE, MARGINS_FILE, ROUNDS_FILE};

pub const BOUND_FILE: &str = "bound.csv";
pub const AUDIT_TOLERANCE: f64 = 1e-9;

pub fn gen_data(spec: &SyntheticSpec, path: &Path) -> Result<(), CliError> {
    let data = gaussian_mixture(spec).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data.write_csv(path)?;
    Ok(())
}

/// A run directory or a checkpoint file.
fn locate(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        (path.join(CHECKPOINT_FILE), Some(path.join(ROUNDS_FILE)))
    } else {
        let rounds = path.parent().map(|d| d.join(ROUNDS_FILE));
        (path.to_path_buf(), rounds.filter(|p| p.is_file()))
    }
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundReport>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Failed(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleAudit {
    pub module: usize,
    pub measures: RankMeasures,
    pub numerical_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankAudit {
    pub modules: Vec<ModuleAudit>,
    pub aggregate: RankMeasures,
    pub rounds_checked: usize,
    pub mismatches: Vec<String>,
}

/// Recomputes the cumulative delta from stored per-round deltas and checks
/// every stored report against it.
pub fn rank_audit(path: &Path) -> Result<RankAudit, CliError> {
    let (ckpt, rounds_path) = locate(path);
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let run: BoostRun = checkpoint::load(&ckpt)?;
    let stored = match rounds_path.filter(|p| p.is_file()) {
        Some(p) => read_rounds(&p)?,
        None => run.reports.clone(),
    };
    let deltas = run.deltas.as_ref().ok_or_else(|| {
        CliError::Failed("the run has no stored per-round deltas; re-run with boost.store_deltas = true".into())
    })?;
    let eps = run.config.adapter.epsilon_rank_eps;
    let mut cumulative: Vec<Matrix> = run
        .cumulative
        .iter()
        .map(|c| Matrix::zeros(c.rows(), c.cols()))
        .collect();
    let mut mismatches = Vec::new();
    if stored.len() != deltas.len() {
        mismatches.push(format!("{} stored reports but {} rounds of deltas", stored.len(), deltas.len()));
    }
    for (t, round) in deltas.iter().enumerate() {
        for (c, d) in cumulative.iter_mut().zip(round) {
            c.add_assign(d)?;
        }
        let per: Vec<RankMeasures> = cumulative
            .iter()
            .map(|c| rank_measures(c, eps))
            .collect::<subboost::Result<_>>()?;
        let agg = aggregate_measures(&per, eps);
        if let Some(rep) = stored.get(t) {
            let s = &rep.rank_measures;
            let mut check = |name: &str, a: f64, b: f64| {
                if !((a - b).abs() <= AUDIT_TOLERANCE * b.abs().max(1.0)) {
                    mismatches.push(format!("round {}: {name} stored {a}, recomputed {b}", t + 1));
                }
            };
            check("participation_ratio", s.participation_ratio, agg.participation_ratio);
            check("eps_rank", s.eps_rank as f64, agg.eps_rank as f64);
            check("frobenius_norm", s.frobenius_norm, agg.frobenius_norm);
            if rep.round != t + 1 {
                mismatches.push(format!("line {}: round field is {}", t + 1, rep.round));
            }
        }
    }
    for (m, (c, kept)) in cumulative.iter().zip(&run.cumulative).enumerate() {
        let diff = c.max_abs_diff(kept)?;
        if diff > AUDIT_TOLERANCE {
            mismatches.push(format!("module {m}: stored accumulator differs by {diff:e}"));
        }
    }
    let modules = cumulative
        .iter()
        .enumerate()
        .map(|(module, c)| {
            Ok(ModuleAudit {
                module,
                measures: rank_measures(c, eps)?,
                numerical_rank: numerical_rank(c, DEFAULT_RANK_TOL)?,
            })
        })
        .collect::<subboost::Result<Vec<_>>>()?;
    let aggregate = aggregate_measures(&modules.iter().map(|m| m.measures).collect::<Vec<_>>(), eps);
    Ok(RankAudit {
        modules,
        aggregate,
        rounds_checked: deltas.len(),
        mismatches,
    })
}

pub fn print_rank_audit(a: &RankAudit, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "module,participation_ratio,eps_rank,frobenius_norm,numerical_rank")?;
    for m in &a.modules {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.module, m.measures.participation_ratio, m.measures.eps_rank, m.measures.frobenius_norm, m.numerical_rank
        )?;
    }
    writeln!(
        out,
        "all,{},{},{},",
        a.aggregate.participation_ratio, a.aggregate.eps_rank, a.aggregate.frobenius_norm
    )?;
    writeln!(out, "cross-check: {} rounds, {} mismatches", a.rounds_checked, a.mismatches.len())?;
    for m in &a.mismatches {
        writeln!(out, "mismatch: {m}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEvalOptions {
    pub delta: f64,
    pub grid_points: usize,
    /// Replaces the round-frozen `X` from the run.
    pub x: Option<f64>,
}

/// Reads `margins.txt` and `rounds.jsonl` from a run directory, writes
/// `bound.csv` there and returns the evaluated bound.
pub fn bound_eval(dir: &Path, opts: &BoundEvalOptions) -> Result<BoundReport, CliError> {
    let margins_path = dir.join(MARGINS_FILE);
    if !margins_path.is_file() {
        return Err(CliError::Usage(format!("no {MARGINS_FILE} in {}", dir.display())));
    }
    let margins = fs::read_to_string(&margins_path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Failed(format!("{}:{}: {e}", margins_path.display(), i + 1)))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let rounds = read_rounds(&dir.join(ROUNDS_FILE))?;
    let b_total = rounds.last().map_or(0.0, |r| r.cumulative_v_norm);
    let x = opts
        .x
        .unwrap_or_else(|| rounds.iter().map(|r| r.feature_norm).fold(0.0, f64::max));
    let grid = default_grid(&margins, opts.grid_points)?;
    let report = evaluate_bound(
        &BoundInputs {
            margins,
            b_total,
            x,
            delta: opts.delta,
        },
        &grid,
    )?;
    let mut w = BufWriter::new(File::create(dir.join(BOUND_FILE))?);
    writeln!(w, "theta,margin_term,complexity_term,confidence_term,bound")?;
    for p in &report.points {
        writeln!(w, "{},{},{},{},{}", p.theta, p.margin_term, p.complexity_term, p.confidence_term, p.bound)?;
    }
    w.flush()?;
    Ok(report)
}

pub fn bound_summary(r: &BoundReport) -> String {
    let s = r.star();
    format!(
        "theta_star={} bound_at_star={} vacuous={} margin_term={} complexity_term={} confidence_term={}",
        r.theta_star, r.bound_at_star, r.vacuous, s.margin_term, s.complexity_term, s.confidence_term
    )
}

/// `%.9g`-style formatting.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One whitespace-separated reward group per input line; one line of
/// advantages per group. Blank lines are skipped.
pub fn advantage(input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rewards = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CliError::Usage(format!("line {}: {t:?} is not a finite number", i + 1)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let group = RewardGroup::new(rewards).map_err(|e| CliError::Usage(format!("line {}: {e}", i + 1)))?;
        let row: Vec<String> = group_advantages(&group).into_iter().map(format_sig9).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
