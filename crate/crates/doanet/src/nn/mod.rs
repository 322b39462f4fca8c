//! Minimal trainable neural stack: dense, GRU, layer norm, activations,
//! MSE losses, Adam with warm-up and gradient clipping.
//!
//! All parameters of a model live in one flat [`ParamStore`]; layers hold
//! handles into it. That keeps clipping, Adam and checkpointing trivial and
//! the reduction order deterministic. Everything runs at double precision.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod store;

pub use gradcheck::numeric_gradient;
pub use layers::{Dense, Gru, LayerNorm};
pub use loss::{mimo_loss, mse_sps_loss};
pub use optim::{clip_global_norm, AdamState, GRAD_CLIP_MAX_NORM};
pub use store::{ParamId, ParamStore};

use ndarray::Array2;

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Upstream grad through a ReLU whose output was `y`.
pub fn relu_backward(y: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Upstream grad through a sigmoid whose output was `y`.
pub fn sigmoid_backward(y: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
    gx
}
