//! Reverse-mode differentiation through the unrolled rollout.
//!
//! The fire masks drawn in the forward pass are frozen constants, so the
//! only stored tensors are the rollout states and masks; perception vectors
//! and hidden activations are recomputed step by step on the way back. All
//! per-cell linear layers run as (H*W, k) GEMMs, mirroring the forward pass.

use crate::config::TrainConfig;
use crate::conv::{conv3x3_adjoint_into, conv3x3_kernel_grad_into};
use crate::error::{Error, Result};
use crate::loss::focal_loss_grad;
use crate::model::{perceive_into, pool, rollout, RolloutTrace};
use crate::params::{GradientSet, NcaParams};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView1};

/// The forward-pass knobs a gradient evaluation depends on.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSpec {
    pub steps: usize,
    pub fire_rate: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl ForwardSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            steps: cfg.steps,
            fire_rate: cfg.fire_rate,
            focal_gamma: cfg.focal_gamma,
            focal_alpha: cfg.focal_alpha,
        }
    }
}

/// Reusable buffers for one backward sweep.
pub(crate) struct BackwardScratch {
    percep: Array2<f64>,
    hidden: Array2<f64>,
    d_update: Array2<f64>,
    d_hidden: Array2<f64>,
    d_percep: Array2<f64>,
    d_state: Array2<f64>,
    d_prev: Array2<f64>,
}

impl BackwardScratch {
    pub fn new(h: usize, w: usize, params: &NcaParams) -> Self {
        let cells = h * w;
        let p = params.dims.perception_channels();
        let n = params.dims.channels;
        let hid = params.dims.hidden;
        Self {
            percep: Array2::zeros((cells, p)),
            hidden: Array2::zeros((cells, hid)),
            d_update: Array2::zeros((cells, n)),
            d_hidden: Array2::zeros((cells, hid)),
            d_percep: Array2::zeros((cells, p)),
            d_state: Array2::zeros((cells, n)),
            d_prev: Array2::zeros((cells, n)),
        }
    }
}

fn add_outer(dst: &mut Array2<f64>, a: &ArrayView1<f64>, b: &ArrayView1<f64>) {
    for (i, &av) in a.iter().enumerate() {
        let mut row = dst.row_mut(i);
        let r = row.as_slice_mut().expect("contiguous");
        for (rv, &bv) in r.iter_mut().zip(b.iter()) {
            *rv += av * bv;
        }
    }
}

fn add_column_sums(dst: &mut Array1<f64>, src: &Array2<f64>) {
    let d = dst.as_slice_mut().expect("contiguous");
    for row in src.rows() {
        let r = row.as_slice().expect("contiguous");
        for (dv, &sv) in d.iter_mut().zip(r) {
            *dv += sv;
        }
    }
}

/// Classifier head backward. Returns (loss, logits, d_pooled).
fn classifier_backward(
    pooled: &Array1<f64>,
    target: usize,
    params: &NcaParams,
    gamma: f64,
    alpha: f64,
    grads: &mut GradientSet,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let mut z1 = params.classifier_w1.dot(pooled);
    z1 += &params.classifier_b1;
    let a1 = z1.mapv(|v| v.max(0.0));
    let mut logits = params.classifier_w2.dot(&a1);
    logits += &params.classifier_b2;

    let (loss, d_logits) = focal_loss_grad(&logits.view(), target, gamma, alpha)?;

    grads.classifier_b2 += &d_logits;
    add_outer(&mut grads.classifier_w2, &d_logits.view(), &a1.view());
    let d_a1 = params.classifier_w2.t().dot(&d_logits);
    let d_z1 =
        Array1::from_shape_fn(d_a1.len(), |i| if z1[i] > 0.0 { d_a1[i] } else { 0.0 });
    grads.classifier_b1 += &d_z1;
    add_outer(&mut grads.classifier_w1, &d_z1.view(), &pooled.view());
    let d_pooled = params.classifier_w1.t().dot(&d_z1);
    Ok((loss, logits, d_pooled))
}

/// Run the classifier and the full rollout backward for one traced sample,
/// accumulating parameter gradients into `grads`. Returns (loss, logits).
pub(crate) fn accumulate_sample_gradients(
    trace: &RolloutTrace,
    target: usize,
    params: &NcaParams,
    gamma: f64,
    alpha: f64,
    grads: &mut GradientSet,
    scratch: &mut BackwardScratch,
) -> Result<(f64, Array1<f64>)> {
    let final_state = trace.final_state();
    let (h, w, n) = final_state.values.dim();
    if n != params.dims.channels {
        return Err(Error::ShapeMismatch {
            context: "trace channels vs params",
            expected: params.dims.channels.to_string(),
            actual: n.to_string(),
        });
    }
    let cells = h * w;
    let p = params.dims.perception_channels();
    let base = if params.dims.perception_identity { n } else { 0 };

    let pooled = pool(final_state);
    let (loss, logits, d_pooled) =
        classifier_backward(&pooled, target, params, gamma, alpha, grads)?;

    // d(pooled)/d(state) spreads the per-channel gradient uniformly
    let scale = 1.0 / cells as f64;
    for mut row in scratch.d_state.rows_mut() {
        let r = row.as_slice_mut().expect("contiguous");
        for (rv, &gv) in r.iter_mut().zip(d_pooled.iter()) {
            *rv = gv * scale;
        }
    }

    for t in (0..trace.fire_masks.len()).rev() {
        let prev = &trace.states[t];
        let mask = trace.fire_masks[t].as_slice().expect("contiguous");

        // recompute the forward intermediates of step t
        perceive_into(prev, params, &mut scratch.percep);
        general_mat_mul(
            1.0,
            &scratch.percep,
            &params.update_w1.t(),
            0.0,
            &mut scratch.hidden,
        );
        {
            let b1 = params.update_b1.as_slice().expect("contiguous");
            for mut row in scratch.hidden.rows_mut() {
                let r = row.as_slice_mut().expect("contiguous");
                for (v, b) in r.iter_mut().zip(b1) {
                    *v = (*v + b).max(0.0);
                }
            }
        }

        // gradient reaching the proposed update: fire gate on d_state
        {
            let ds = scratch.d_state.as_slice().expect("contiguous");
            let du = scratch.d_update.as_slice_mut().expect("contiguous");
            for (cell, &f) in mask.iter().enumerate() {
                let src = &ds[cell * n..(cell + 1) * n];
                let dst = &mut du[cell * n..(cell + 1) * n];
                if f == 1.0 {
                    dst.copy_from_slice(src);
                } else {
                    dst.fill(0.0);
                }
            }
        }

        add_column_sums(&mut grads.update_b2, &scratch.d_update);
        general_mat_mul(
            1.0,
            &scratch.d_update.t(),
            &scratch.hidden,
            1.0,
            &mut grads.update_w2,
        );
        general_mat_mul(
            1.0,
            &scratch.d_update,
            &params.update_w2,
            0.0,
            &mut scratch.d_hidden,
        );
        // relu gate: post-activation zero means the unit did not fire
        {
            let a = scratch.hidden.as_slice().expect("contiguous");
            let dh = scratch.d_hidden.as_slice_mut().expect("contiguous");
            for (dv, &av) in dh.iter_mut().zip(a) {
                if av <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        add_column_sums(&mut grads.update_b1, &scratch.d_hidden);
        general_mat_mul(
            1.0,
            &scratch.d_hidden.t(),
            &scratch.percep,
            1.0,
            &mut grads.update_w1,
        );
        general_mat_mul(
            1.0,
            &scratch.d_hidden,
            &params.update_w1,
            0.0,
            &mut scratch.d_percep,
        );

        // residual identity path
        scratch.d_prev.assign(&scratch.d_state);
        let dp = scratch.d_percep.as_slice().expect("contiguous");
        let dprev = scratch.d_prev.as_slice_mut().expect("contiguous");
        if params.dims.perception_identity {
            for cell in 0..cells {
                let g = &dp[cell * p..cell * p + n];
                let d = &mut dprev[cell * n..(cell + 1) * n];
                for c in 0..n {
                    d[c] += g[c];
                }
            }
        }
        let src = prev.values.as_slice().expect("contiguous");
        let k1 = params.kernel1.as_slice().expect("contiguous");
        let k2 = params.kernel2.as_slice().expect("contiguous");
        conv3x3_adjoint_into(dp, h, w, n, k1, dprev, p, base);
        conv3x3_adjoint_into(dp, h, w, n, k2, dprev, p, base + n);
        let dk1 = grads.kernel1.as_slice_mut().expect("contiguous");
        conv3x3_kernel_grad_into(src, h, w, n, dp, dk1, p, base);
        let dk2 = grads.kernel2.as_slice_mut().expect("contiguous");
        conv3x3_kernel_grad_into(src, h, w, n, dp, dk2, p, base + n);

        std::mem::swap(&mut scratch.d_state, &mut scratch.d_prev);
    }

    Ok((loss, logits))
}

/// Loss, logits and parameter gradients for one image and label.
pub fn loss_and_gradients(
    image: &Array3<f64>,
    target: usize,
    params: &NcaParams,
    spec: &ForwardSpec,
    rng_seed: u64,
) -> Result<(f64, Array1<f64>, GradientSet)> {
    let trace = rollout(image, params, spec.steps, spec.fire_rate, rng_seed)?;
    let mut grads = GradientSet::zeros(params.dims);
    let mut scratch = BackwardScratch::new(
        trace.final_state().height(),
        trace.final_state().width(),
        params,
    );
    let (loss, logits) = accumulate_sample_gradients(
        &trace,
        target,
        params,
        spec.focal_gamma,
        spec.focal_alpha,
        &mut grads,
        &mut scratch,
    )?;
    Ok((loss, logits, grads))
}
