//! Adaptive-moment optimizer with decoupled weight decay, and the learning
//! rate / momentum schedules used by the training loops.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

/// First/second moment buffers and step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One AdamW update. `decay_mask` selects elements that receive weight
    /// decay; `None` decays nothing.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [f64], grad: &[f64], decay_mask: Option<&[bool]>) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            if cfg.weight_decay != 0.0 && decay_mask.is_some_and(|m| m[i]) {
                params[i] -= lr * cfg.weight_decay * params[i];
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Linear warmup from 0 to `max` over `warmup` steps, then cosine decay to 0
/// at `total`. `step` counts completed updates.
pub fn warmup_cosine(max: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if step < warmup {
        return max * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return max;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * max * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Cosine ramp of the EMA momentum from `base` at step 0 to 1 at `total`.
pub fn momentum_cosine(base: f64, total: u64, step: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    1.0 - (1.0 - base) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Step decay: `lr · gamma^(epoch / step_epochs)`.
pub fn step_decay(lr: f64, gamma: f64, step_epochs: usize, epoch: usize) -> f64 {
    lr * gamma.powi((epoch / step_epochs.max(1)) as i32)
}
