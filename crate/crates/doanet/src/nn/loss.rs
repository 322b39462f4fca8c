//! SPS regression losses: squared error summed over frames and bins.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Frame-wise squared error summed over bins and frames, with its gradient
/// `2 * (estimate - target)`.
pub fn mse_sps_loss(estimate: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if estimate.raw_dim() != target.raw_dim() {
        return Err(Error::InvalidInput(format!(
            "loss shape mismatch: {:?} vs {:?}",
            estimate.shape(),
            target.shape()
        )));
    }
    let diff = estimate - target;
    let loss = diff.iter().map(|&d| d * d).sum();
    Ok((loss, diff.mapv(|d| 2.0 * d)))
}

/// Sum of per-branch losses; the branch assignment is fixed by the angle
/// sorting, so there is no permutation search and no branch weighting.
pub fn mimo_loss(
    estimates: &[Array2<f64>],
    targets: &[Array2<f64>],
) -> Result<(f64, Vec<Array2<f64>>)> {
    if estimates.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "branch count mismatch: {} estimates vs {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(estimates.len());
    for (e, t) in estimates.iter().zip(targets) {
        let (l, g) = mse_sps_loss(e, t)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}
