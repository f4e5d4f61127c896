//! Group-relative advantages and the clipped policy surrogate.
//!
//! These operate on rewards and probability ratios supplied by the caller;
//! nothing here samples or scores completions.

use crate::error::{Error, Result};

pub const DEFAULT_ADV_EPS: f64 = 1e-4;
pub const DEFAULT_CLIP: f64 = 0.2;

/// Rewards of one group of sampled completions.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub epsilon: f64,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>) -> Result<Self> {
        Self::with_epsilon(rewards, DEFAULT_ADV_EPS)
    }

    pub fn with_epsilon(rewards: Vec<f64>, epsilon: f64) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a reward group needs at least 2 members, got {}",
                rewards.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("non-finite reward".into()));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidInput(format!("epsilon {epsilon} must be nonnegative")));
        }
        Ok(Self { rewards, epsilon })
    }
}

/// `Âᵢ = (rᵢ − r̄) / (σ_r + ε)` with the population standard deviation.
///
/// A constant group has a zero numerator, so its advantages are zero even
/// when `ε = 0`.
pub fn group_advantages(g: &RewardGroup) -> Vec<f64> {
    let n = g.rewards.len() as f64;
    let mean = g.rewards.iter().sum::<f64>() / n;
    let var = g.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + g.epsilon;
    g.rewards
        .iter()
        .map(|r| {
            let centered = r - mean;
            if centered == 0.0 {
                0.0
            } else {
                centered / denom
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateInputs {
    pub advantages: Vec<f64>,
    /// `π_new / π_old` per sample.
    pub ratios: Vec<f64>,
    pub clip: f64,
    pub kl_coef: f64,
    pub kl_estimates: Option<Vec<f64>>,
}

impl SurrogateInputs {
    pub fn new(advantages: Vec<f64>, ratios: Vec<f64>) -> Self {
        Self {
            advantages,
            ratios,
            clip: DEFAULT_CLIP,
            kl_coef: 0.0,
            kl_estimates: None,
        }
    }
}

/// `mean(−min(ρÂ, clip(ρ, 1−ε, 1+ε)·Â)) + β·mean(KL)`.
pub fn clipped_surrogate(s: &SurrogateInputs) -> Result<f64> {
    let n = s.advantages.len();
    if n == 0 || s.ratios.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} advantages vs {} ratios",
            n,
            s.ratios.len()
        )));
    }
    if let Some(bad) = s.ratios.iter().find(|&&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidInput(format!("probability ratio {bad} must be positive")));
    }
    if !(s.clip >= 0.0) || !(s.kl_coef >= 0.0) {
        return Err(Error::InvalidInput("clip and kl_coef must be nonnegative".into()));
    }
    let policy = s
        .advantages
        .iter()
        .zip(&s.ratios)
        .map(|(&a, &r)| {
            let clipped = r.clamp(1.0 - s.clip, 1.0 + s.clip);
            -(r * a).min(clipped * a)
        })
        .sum::<f64>()
        / n as f64;
    let kl = match &s.kl_estimates {
        Some(kl) if s.kl_coef != 0.0 => {
            if kl.len() != n {
                return Err(Error::InvalidInput(format!("{} KL estimates for {n} samples", kl.len())));
            }
            s.kl_coef * kl.iter().sum::<f64>() / n as f64
        }
        _ => 0.0,
    };
    Ok(policy + kl)
}

/// Exact-match reward.
pub fn binary_reward<T: PartialEq + ?Sized>(pred: &T, target: &T) -> f64 {
    if pred == target {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_group_is_zero() {
        let g = RewardGroup::new(vec![0.7; 5]).unwrap();
        assert_eq!(group_advantages(&g), vec![0.0; 5]);
        let g0 = RewardGroup::with_epsilon(vec![1.0; 3], 0.0).unwrap();
        assert_eq!(group_advantages(&g0), vec![0.0; 3]);
    }

    #[test]
    fn two_of_eight_hand_values() {
        let g = RewardGroup::new(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let a = group_advantages(&g);
        let std = 0.1875f64.sqrt();
        assert!((a[0] - 0.75 / (std + 1e-4)).abs() < 1e-15);
        assert!((a[2] + 0.25 / (std + 1e-4)).abs() < 1e-15);
        assert!((a[0] - 1.732).abs() < 1e-3 && (a[2] + 0.577).abs() < 1e-3);
        assert!(a.iter().sum::<f64>().abs() < 1e-10 * 8.0);
    }

    #[test]
    fn singleton_rejected() {
        assert!(RewardGroup::new(vec![1.0]).is_err());
    }

    #[test]
    fn surrogate_cases() {
        let unit = SurrogateInputs::new(vec![1.0, -1.0], vec![1.0, 1.0]);
        assert_eq!(clipped_surrogate(&unit).unwrap(), 0.0);
        let clipped = SurrogateInputs::new(vec![1.0], vec![2.0]);
        assert!((clipped_surrogate(&clipped).unwrap() + 1.2).abs() < 1e-15);
        let mut with_kl = unit.clone();
        with_kl.kl_estimates = Some(vec![0.3, 0.1]);
        assert_eq!(clipped_surrogate(&with_kl).unwrap(), clipped_surrogate(&unit).unwrap());
        with_kl.kl_coef = 0.5;
        assert!((clipped_surrogate(&with_kl).unwrap() - 0.1).abs() < 1e-15);
        let bad = SurrogateInputs::new(vec![1.0], vec![0.0]);
        assert!(clipped_surrogate(&bad).is_err());
    }

    #[test]
    fn dead_group_has_flat_surrogate() {
        let rewards: Vec<f64> = (0..8).map(|i| binary_reward(&i, &99)).collect();
        let adv = group_advantages(&RewardGroup::new(rewards).unwrap());
        assert!(adv.iter().all(|a| *a == 0.0));
        // zero advantages: the surrogate does not depend on the ratios at all
        let a = clipped_surrogate(&SurrogateInputs::new(adv.clone(), vec![1.3; 8])).unwrap();
        let b = clipped_surrogate(&SurrogateInputs::new(adv, vec![0.6; 8])).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn rewards() {
        assert_eq!(binary_reward("42", "42"), 1.0);
        assert_eq!(binary_reward(&3usize, &4usize), 0.0);
    }
}
