//! AdamW, a warmup + cosine learning-rate schedule, and global-norm
//! gradient clipping over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::linalg::norm2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    /// Warmup is `ceil(ratio · total)`, floored at one step.
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup = ((warmup_ratio * total_steps as f64).ceil() as usize)
            .max(1)
            .min(total_steps.max(1));
        Self {
            base_lr,
            total_steps,
            warmup_steps: warmup,
        }
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescales `grads` in place so `‖grads‖₂ ≤ max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = norm2(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert!(s.lr(99) < 0.001);
        // very short rounds still get one warmup step
        assert_eq!(CosineSchedule::new(1.0, 3, 0.1).warmup_steps, 1);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((norm2(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![0.1, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_descends_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[1.0, -2.0], 0.0);
        assert_eq!(p, vec![0.0, 0.0]);

        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut x = vec![3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 1.0)];
            opt.step(&mut x, &g, 0.01);
        }
        assert!((x[0] - 1.0).abs() < 0.05, "{}", x[0]);
    }
}
