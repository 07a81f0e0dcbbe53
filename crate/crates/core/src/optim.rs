//! Adam with bias correction and exponential learning-rate decay.
//!
//! The effective rate for optimizer step s (1-based) is
//! `learning_rate * lr_decay^(s-1)`; moments follow Kingma & Ba with the
//! usual `1 - beta^s` corrections.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{GradientSet, NcaParams, ParamDims};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Number of optimizer steps taken so far.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(dims: ParamDims, cfg: &TrainConfig) -> Self {
        let len = NcaParams::zeros(dims).num_params();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            learning_rate: cfg.learning_rate,
            lr_decay: cfg.lr_decay,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Learning rate that the next `apply` call will use.
    pub fn next_learning_rate(&self) -> f64 {
        self.learning_rate * self.lr_decay.powi(self.step as i32)
    }

    /// One optimizer step: update moments from `grads` and move `params`
    /// against the bias-corrected direction.
    pub fn apply(&mut self, params: &mut NcaParams, grads: &GradientSet) -> Result<()> {
        let gflat = grads.to_flat();
        if gflat.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "adam state vs gradients",
                expected: self.m.len().to_string(),
                actual: gflat.len().to_string(),
            });
        }
        if gflat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "adam gradients",
                step: self.step as usize,
            });
        }
        let lr = self.next_learning_rate();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let mut flat = params.to_flat();
        for i in 0..flat.len() {
            let g = gflat[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            flat[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        *params = NcaParams::from_flat(params.dims, &flat)?;
        Ok(())
    }
}
