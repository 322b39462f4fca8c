//! Adam with linear warm-up and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::store::ParamStore;

pub const GRAD_CLIP_MAX_NORM: f64 = 3.0;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// Rescales the gradient vector when its L2 norm exceeds `max_norm`.
/// Returns the scale factor applied (1.0 when no clipping happened).
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    grad.iter_mut().for_each(|g| *g *= scale);
    scale
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied directly to the parameters at each
    /// step (not through the gradient moments). 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// One Adam update from `store.grad`, with the learning rate scaled by
    /// `lr_scale` (warm-up multiplier; 1.0 after the first epoch).
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: f64) {
        assert_eq!(self.m.len(), store.len(), "optimizer/param size mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let lr = self.lr * lr_scale;
        for i in 0..store.len() {
            let g = store.grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            store.data[i] -=
                lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * store.data[i]);
        }
    }
}

/// Warm-up multiplier: `step_in_epoch / steps_per_epoch` during the first
/// epoch, 1.0 afterwards. `epoch` is zero-based.
pub fn warmup_scale(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
    if epoch == 0 {
        (step_in_epoch + 1) as f64 / steps_per_epoch as f64
    } else {
        1.0
    }
}
