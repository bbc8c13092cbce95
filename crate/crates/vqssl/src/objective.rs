//! Dual-target alignment loss and the total training objective.

use crate::error::{Error, Result};
use crate::nn::l2_norm;

/// All loss terms logged per step. `l_sim` is the mean of the two regression
/// terms, `l_vq` the sum over scales, `l_total = l_sim + lambda * l_vq`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_reg_hphi: f64,
    pub l_reg_qt: f64,
    pub l_sim: f64,
    pub l_vq_per_scale: [f64; 3],
    pub l_vq: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Compose the full-objective breakdown from its raw terms.
    pub fn compose(l_reg_hphi: f64, l_reg_qt: f64, l_vq_per_scale: [f64; 3], lambda: f64) -> LossBreakdown {
        let l_sim = 0.5 * (l_reg_hphi + l_reg_qt);
        Self::with_sim(l_reg_hphi, l_reg_qt, l_sim, l_vq_per_scale, lambda)
    }

    /// Variant-specific composition where `l_sim` is not the plain average
    /// (single-target ablations).
    pub fn with_sim(
        l_reg_hphi: f64,
        l_reg_qt: f64,
        l_sim: f64,
        l_vq_per_scale: [f64; 3],
        lambda: f64,
    ) -> LossBreakdown {
        let l_vq = l_vq_per_scale.iter().sum();
        LossBreakdown {
            l_reg_hphi,
            l_reg_qt,
            l_sim,
            l_vq_per_scale,
            l_vq,
            l_total: l_sim + lambda * l_vq,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_reg_hphi, self.l_reg_qt, self.l_sim, self.l_vq, self.l_total]
            .iter()
            .chain(self.l_vq_per_scale.iter())
            .all(|v| v.is_finite())
    }
}

const ZERO_NORM_GUARD: f64 = 1e-12;

/// Cosine regression `2 - 2 <x, y> / (|x| |y|)`, range [0, 4].
pub fn cosine_regression(x: &[f64], y: &[f64]) -> Result<f64> {
    let nx = l2_norm(x);
    let ny = l2_norm(y);
    if nx < ZERO_NORM_GUARD || ny < ZERO_NORM_GUARD {
        return Err(Error::ZeroNorm { norm: nx.min(ny) });
    }
    let mut cos = 0.0;
    for (a, b) in x.iter().zip(y) {
        cos += a * b;
    }
    cos /= nx * ny;
    Ok(2.0 - 2.0 * cos)
}

/// Gradient of [`cosine_regression`] with respect to `x`:
/// `(-2 / |x|) (y_hat - cos * x_hat)`.
pub fn cosine_regression_grad(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let nx = l2_norm(x);
    let ny = l2_norm(y);
    if nx < ZERO_NORM_GUARD || ny < ZERO_NORM_GUARD {
        return Err(Error::ZeroNorm { norm: nx.min(ny) });
    }
    let xh: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let yh: Vec<f64> = y.iter().map(|v| v / ny).collect();
    let cos: f64 = xh.iter().zip(&yh).map(|(a, b)| a * b).sum();
    Ok(xh
        .iter()
        .zip(&yh)
        .map(|(xi, yi)| (-2.0 / nx) * (yi - cos * xi))
        .collect())
}

/// Dual-target similarity loss. Both targets are treated as constants here;
/// gradient routing into the refinement head is the trainer's decision.
pub fn sim_loss(h_theta: &[f64], h_phi: &[f64], q_t: &[f64]) -> Result<(f64, f64, f64)> {
    let l_hphi = cosine_regression(h_theta, h_phi)?;
    let l_qt = cosine_regression(h_theta, q_t)?;
    Ok((l_hphi, l_qt, 0.5 * (l_hphi + l_qt)))
}

/// Total objective `l_total = l_sim + lambda * sum_j l_vq_j`.
pub fn total_loss(l_sim: f64, l_vq_per_scale: [f64; 3], lambda: f64) -> (f64, f64) {
    let l_vq: f64 = l_vq_per_scale.iter().sum();
    (l_vq, l_sim + lambda * l_vq)
}
