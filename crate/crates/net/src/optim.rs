//! Adam with a masked update set and a staged step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    mask: Vec<bool>,
    t: u32,
}

impl Adam {
    /// Optimizer over the currently trainable entries of `store`.
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            mask: store.trainable_mask(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update. Frozen elements are never written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[f32], lr: f32) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let values = store.values_mut();
        for i in 0..values.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Base rate scaled by `factors[i]` once `epoch >= milestones[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f32,
    pub milestones: Vec<usize>,
    pub factors: Vec<f32>,
}

impl StepSchedule {
    /// Milestones placed at the same fractions of training as a 25-epoch
    /// run decaying at epochs 10, 15 and 20.
    pub fn scaled(base_lr: f32, epochs: usize, factors: Vec<f32>) -> Self {
        let fractions = [0.4, 0.6, 0.8];
        let milestones = fractions
            .iter()
            .take(factors.len())
            .map(|f| ((f * epochs as f64).round() as usize).max(1))
            .collect();
        Self {
            base_lr,
            milestones,
            factors,
        }
    }

    pub fn lr(&self, epoch: usize) -> f32 {
        let mut lr = self.base_lr;
        for (m, f) in self.milestones.iter().zip(&self.factors) {
            if epoch >= *m {
                lr = self.base_lr * f;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn masked_entries_stay_bitwise_equal() {
        let mut s = ParamStore::new();
        s.add("w", vec![3], ParamKind::Weight, vec![0.3, -0.2, 0.1]);
        s.add("b", vec![1], ParamKind::Bias, vec![0.0]);
        s.set_trainable(|e| e.kind == ParamKind::Bias);
        let before = s.values().to_vec();
        let mut adam = Adam::new(&s, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut s, &[1.0, 1.0, 1.0, 1.0], 0.01);
        }
        assert_eq!(&s.values()[..3], &before[..3]);
        assert!(s.values()[3] < 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        s.add("x", vec![1], ParamKind::Weight, vec![3.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        for _ in 0..2000 {
            let x = s.values()[0];
            adam.step(&mut s, &[2.0 * (x - 1.0)], 0.01);
        }
        assert!((s.values()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn schedule_scales_milestones() {
        let full = StepSchedule::scaled(2e-3, 25, vec![0.5, 0.1, 0.05]);
        assert_eq!(full.milestones, vec![10, 15, 20]);
        assert_eq!(full.lr(0), 2e-3);
        assert_eq!(full.lr(10), 1e-3);
        assert_eq!(full.lr(24), 2e-3 * 0.05);
        let short = StepSchedule::scaled(2e-3, 10, vec![0.5, 0.1, 0.05]);
        assert_eq!(short.milestones, vec![4, 6, 8]);
    }
}
