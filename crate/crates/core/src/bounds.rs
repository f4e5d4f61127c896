//! Numerical evaluation of the margin generalization bound
//!
//! ```text
//! Pr_test[error] ≤ Pr_train[m_T < θ] + 2·X·B_total / (θ·√n) + √(ln(2/δ) / 2n)
//! ```
//!
//! over a grid of margin thresholds θ, plus the audit of the condition under
//! which a merge can flip a correct example (`m(x) < M·ε·H`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::model::{FrozenModel, Prediction};

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_GRID_POINTS: usize = 64;

/// `2·X·B_total / (θ·√n)`.
pub fn complexity_term(x: f64, b_total: f64, theta: f64, n: usize) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::OutOfRange(format!("margin threshold {theta}")));
    }
    if n == 0 {
        return Err(Error::OutOfRange("sample size 0".into()));
    }
    if !(x >= 0.0 && b_total >= 0.0) {
        return Err(Error::OutOfRange(format!("X = {x}, B_total = {b_total}")));
    }
    Ok(2.0 * x * b_total / (theta * (n as f64).sqrt()))
}

/// Fraction of margins strictly below `theta`.
pub fn margin_term(margins: &[f64], theta: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::OutOfRange(format!("margin threshold {theta}")));
    }
    if margins.is_empty() {
        return Ok(0.0);
    }
    let below = margins.iter().filter(|&&m| m < theta).count();
    Ok(below as f64 / margins.len() as f64)
}

/// `√(ln(2/δ) / 2n)`.
pub fn confidence_term(delta: f64, n: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::OutOfRange(format!("delta {delta} (must lie in (0, 1))")));
    }
    if n == 0 {
        return Err(Error::OutOfRange("sample size 0".into()));
    }
    Ok(((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    /// Training margins after the final round; `n` is their count.
    pub margins: Vec<f64>,
    pub b_total: f64,
    pub x: f64,
    pub delta: f64,
}

impl BoundInputs {
    pub fn n(&self) -> usize {
        self.margins.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub theta: f64,
    pub margin_term: f64,
    pub complexity_term: f64,
    pub confidence_term: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub points: Vec<BoundPoint>,
    pub theta_star: f64,
    pub bound_at_star: f64,
    /// The bound says nothing: its minimum is at least 1.
    pub vacuous: bool,
}

impl BoundReport {
    pub fn star(&self) -> &BoundPoint {
        self.points
            .iter()
            .find(|p| p.theta == self.theta_star)
            .expect("theta_star is a grid point")
    }
}

/// `points` log-spaced thresholds over `[0.01·max_margin, max_margin]`.
pub fn default_grid(margins: &[f64], points: usize) -> Result<Vec<f64>> {
    let top = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::InvalidInput(
            "default θ grid needs at least one positive finite margin".into(),
        ));
    }
    if points < 2 {
        return Ok(vec![top]);
    }
    let (lo, hi) = ((0.01 * top).ln(), top.ln());
    Ok((0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

/// All three terms at every grid point and the minimizing θ (ties go to the
/// smaller θ).
pub fn evaluate_bound(inputs: &BoundInputs, grid: &[f64]) -> Result<BoundReport> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty θ grid".into()));
    }
    let n = inputs.n();
    let conf = confidence_term(inputs.delta, n)?;
    let mut sorted = inputs.margins.clone();
    sorted.sort_by(f64::total_cmp);
    let points = grid
        .iter()
        .map(|&theta| {
            let complexity = complexity_term(inputs.x, inputs.b_total, theta, n)?;
            let margin = sorted.partition_point(|&m| m < theta) as f64 / n as f64;
            Ok(BoundPoint {
                theta,
                margin_term: margin,
                complexity_term: complexity,
                confidence_term: conf,
                bound: margin + complexity + conf,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = &points[0];
    for p in &points[1..] {
        if p.bound < best.bound || (p.bound == best.bound && p.theta < best.theta) {
            best = p;
        }
    }
    Ok(BoundReport {
        theta_star: best.theta,
        bound_at_star: best.bound,
        vacuous: best.bound >= 1.0,
        points,
    })
}

/// `X = max_{t,x} ‖φ_t(x)‖₂` over the given round adapters (their windows and
/// projections; `v` is ignored) evaluated at the current weights of `model`.
pub fn estimate_x(model: &FrozenModel, data: &LabeledDataset, rounds: &[AdapterState]) -> Result<f64> {
    let mut x = 0.0f64;
    for round in rounds {
        x = x.max(round_feature_norm(model, data, round)?);
    }
    Ok(x)
}

/// `max_x ‖φ(x)‖₂` for one round's adapter.
pub fn round_feature_norm(model: &FrozenModel, data: &LabeledDataset, adapter: &AdapterState) -> Result<f64> {
    let mut frozen = adapter.clone();
    frozen.set_v_flat(&vec![0.0; frozen.num_params()])?;
    let norms = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(norm2(&model.margin_features(data.x(i), data.y(i), &frozen)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub index: usize,
    pub margin_before: f64,
}

/// Correct → incorrect flips across one merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionAudit {
    pub flips: Vec<Flip>,
    /// Flips whose pre-merge margin was not below `threshold`.
    pub violations: Vec<Flip>,
    /// `M·ε·H`.
    pub threshold: f64,
    pub previously_correct: usize,
    /// `flips / previously_correct` (0 when nothing was correct).
    pub rate: f64,
}

impl RegressionAudit {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn regression_audit(
    before: &[Prediction],
    after: &[Prediction],
    modules: usize,
    eps: f64,
    h: f64,
) -> Result<RegressionAudit> {
    if before.len() != after.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions before the merge, {} after",
            before.len(),
            after.len()
        )));
    }
    let threshold = modules as f64 * eps * h;
    let flips: Vec<Flip> = before
        .iter()
        .zip(after)
        .enumerate()
        .filter(|(_, (b, a))| b.correct && !a.correct)
        .map(|(index, (b, _))| Flip {
            index,
            margin_before: b.margin,
        })
        .collect();
    let violations = flips
        .iter()
        .copied()
        .filter(|f| !(f.margin_before < threshold))
        .collect();
    let previously_correct = before.iter().filter(|p| p.correct).count();
    let rate = if previously_correct == 0 {
        0.0
    } else {
        flips.len() as f64 / previously_correct as f64
    };
    Ok(RegressionAudit {
        flips,
        violations,
        threshold,
        previously_correct,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complexity_examples() {
        let c = complexity_term(115.6, 0.81, 2.6, 50_000).unwrap();
        assert!((c - 0.322).abs() < 0.002, "{c}");
        let small = complexity_term(1.0, 0.2, 1.0, 7_500).unwrap();
        assert!((small - 0.0046).abs() < 0.0005, "{small}");
        assert_eq!(complexity_term(3.0, 0.0, 1.0, 10).unwrap(), 0.0);
        assert!(complexity_term(1.0, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn margin_term_examples() {
        let m = [0.5, 1.5, 2.5];
        assert_eq!(margin_term(&m, 0.1).unwrap(), 0.0);
        assert_eq!(margin_term(&m, 3.0).unwrap(), 1.0);
        assert_eq!(margin_term(&m, 2.0).unwrap(), 2.0 / 3.0);
        // strict: a margin equal to θ is not counted
        assert_eq!(margin_term(&m, 1.5).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn confidence_examples() {
        let c = confidence_term(0.05, 50_000).unwrap();
        assert!((c - 0.00607).abs() < 1e-5, "{c}");
        let ratio = confidence_term(0.05, 100).unwrap() / confidence_term(0.05, 400).unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
        let delta = 2.0 * (-2.0f64).exp();
        assert!((confidence_term(delta, 25).unwrap() - 0.2).abs() < 1e-12);
        assert!(confidence_term(1.0, 10).is_err());
        assert!(confidence_term(0.0, 10).is_err());
    }

    #[test]
    fn bound_selection() {
        let inputs = BoundInputs {
            margins: vec![0.5, 1.0, 2.0, 4.0],
            b_total: 0.1,
            x: 1.0,
            delta: 0.05,
        };
        let one = evaluate_bound(&inputs, &[1.7]).unwrap();
        assert_eq!(one.theta_star, 1.7);
        let r = evaluate_bound(&inputs, &default_grid(&inputs.margins, 64).unwrap()).unwrap();
        for p in &r.points {
            assert!((p.bound - (p.margin_term + p.complexity_term + p.confidence_term)).abs() < 1e-12);
            assert!(p.bound >= r.bound_at_star);
        }
        let huge = BoundInputs { x: 1e9, ..inputs };
        assert!(evaluate_bound(&huge, &[0.5, 1.0, 2.0]).unwrap().vacuous);
        assert!(evaluate_bound(&huge, &[]).is_err());
    }

    #[test]
    fn ties_pick_smaller_theta() {
        let inputs = BoundInputs {
            margins: vec![10.0; 4],
            b_total: 0.0,
            x: 0.0,
            delta: 0.05,
        };
        let r = evaluate_bound(&inputs, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.theta_star, 1.0);
    }

    fn pred(margin: f64) -> Prediction {
        Prediction::from_logits(vec![margin, 0.0], 0)
    }

    #[test]
    fn audit_cases() {
        let same: Vec<Prediction> = [1.0, -0.5, 2.0].iter().map(|&m| pred(m)).collect();
        let a = regression_audit(&same, &same, 3, 0.01, 5.0).unwrap();
        assert!(a.flips.is_empty() && a.holds());

        let before = vec![pred(10.0), pred(0.05)];
        let after = vec![pred(-0.1), pred(-0.01)];
        let a = regression_audit(&before, &after, 1, 0.1, 1.0).unwrap();
        assert_eq!(a.flips.len(), 2);
        assert_eq!(a.violations, vec![Flip { index: 0, margin_before: 10.0 }]);
        assert!(!a.holds());
        assert_eq!(a.rate, 1.0);
        assert!(regression_audit(&before, &after[..1], 1, 0.1, 1.0).is_err());
    }
}
