//! Focal loss over class logits, with its analytic gradient.
//!
//! `gamma = 0` with `alpha = 1` reduces exactly to cross entropy. Softmax
//! probabilities are computed through a max-shifted log-sum-exp so large
//! logits stay finite.

use crate::error::{Error, Result};
use ndarray::{Array1, ArrayView1};

/// Softmax probabilities via max-shifted exponentials.
pub fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|z| (z - max).exp());
    let sum: f64 = p.sum();
    p.mapv_inplace(|v| v / sum);
    p
}

fn check_inputs(logits: &ArrayView1<f64>, target: usize, gamma: f64, alpha: f64) -> Result<()> {
    if target >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: target,
            num_classes: logits.len(),
        });
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig {
            field: "focal_gamma".to_string(),
            message: format!("must be finite and >= 0, got {gamma}"),
        });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig {
            field: "focal_alpha".to_string(),
            message: format!("must be finite and > 0, got {alpha}"),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "loss logits",
            step: 0,
        });
    }
    Ok(())
}

/// Focal loss `-alpha * (1 - p_t)^gamma * log(p_t)` for one sample.
pub fn focal_loss(logits: &ArrayView1<f64>, target: usize, gamma: f64, alpha: f64) -> Result<f64> {
    check_inputs(logits, target, gamma, alpha)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let log_pt = logits[target] - lse;
    let pt = log_pt.exp();
    Ok(-alpha * (1.0 - pt).powf(gamma) * log_pt)
}

/// Loss value and gradient with respect to the logits.
///
/// d/dz_k = g'(p_t) * p_t * (delta_kt - p_k) where g(p) is the focal factor.
/// As p_t -> 1 the (1 - p_t)^(gamma - 1) factor is guarded so the gradient
/// stays finite for gamma < 1.
pub fn focal_loss_grad(
    logits: &ArrayView1<f64>,
    target: usize,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, Array1<f64>)> {
    check_inputs(logits, target, gamma, alpha)?;
    let p = softmax(logits);
    let pt = p[target];
    let log_pt = pt.ln();
    let one_minus = 1.0 - pt;
    let loss = -alpha * one_minus.powf(gamma) * log_pt;

    // dL/d(log p_t) = -alpha * [ (1-p_t)^g - g*(1-p_t)^(g-1) * p_t * log p_t ]
    let dl_dlogpt = if gamma == 0.0 {
        -alpha
    } else {
        let pow_g = one_minus.powf(gamma);
        let pow_gm1 = if one_minus <= 0.0 {
            0.0
        } else {
            one_minus.powf(gamma - 1.0)
        };
        -alpha * (pow_g - gamma * pow_gm1 * pt * log_pt)
    };

    // d(log p_t)/dz_k = delta_kt - p_k
    let mut grad = p.clone();
    grad.mapv_inplace(|pk| -pk);
    grad[target] += 1.0;
    grad.mapv_inplace(|v| v * dl_dlogpt);
    Ok((loss, grad))
}
