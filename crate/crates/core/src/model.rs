//! Forward computation: perception, stochastic residual update, T-step
//! rollout, average pooling and the classifier head.
//!
//! The per-cell linear layers are evaluated as (H*W, k) matrix products so
//! the whole grid goes through GEMM; `StepScratch` keeps the intermediate
//! buffers alive across rollout steps.

use crate::conv::conv3x3_into;
use crate::error::{Error, Result};
use crate::grid::{seed_state, GridState};
use crate::params::NcaParams;
use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-cell firing gate for one step: 1.0 applies the update, 0.0 skips it.
pub type FireMask = Array2<f64>;

/// Every state of a rollout (length T+1) plus the T fire masks that
/// produced it.
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub states: Vec<GridState>,
    pub fire_masks: Vec<FireMask>,
}

impl RolloutTrace {
    pub fn final_state(&self) -> &GridState {
        self.states.last().expect("trace has at least the seed state")
    }
}

/// Reusable buffers for one grid-sized step.
pub(crate) struct StepScratch {
    /// Perception vectors, one row per cell: (H*W, perception_channels).
    pub percep: Array2<f64>,
    /// Hidden activations of the update net: (H*W, hidden).
    pub hidden: Array2<f64>,
    /// Proposed residual updates: (H*W, n).
    pub update: Array2<f64>,
}

impl StepScratch {
    pub fn new(h: usize, w: usize, params: &NcaParams) -> Self {
        let cells = h * w;
        Self {
            percep: Array2::zeros((cells, params.dims.perception_channels())),
            hidden: Array2::zeros((cells, params.dims.hidden)),
            update: Array2::zeros((cells, params.dims.channels)),
        }
    }
}

fn check_state_params(state: &GridState, params: &NcaParams) -> Result<()> {
    if state.channels() != params.dims.channels {
        return Err(Error::ShapeMismatch {
            context: "state channels vs params",
            expected: params.dims.channels.to_string(),
            actual: state.channels().to_string(),
        });
    }
    Ok(())
}

/// Fill `percep` with the per-cell perception vectors of `state`:
/// `[state, K1 * state, K2 * state]` (or just the two kernel responses when
/// the identity concatenation is disabled). Replicate padding at borders.
pub(crate) fn perceive_into(state: &GridState, params: &NcaParams, percep: &mut Array2<f64>) {
    let (h, w, n) = state.values.dim();
    let p = params.dims.perception_channels();
    let src = state.values.as_slice().expect("contiguous state");
    let dst = percep.as_slice_mut().expect("contiguous perception");
    let identity = params.dims.perception_identity;
    let base = if identity { n } else { 0 };
    if identity {
        for cell in 0..h * w {
            dst[cell * p..cell * p + n].copy_from_slice(&src[cell * n..(cell + 1) * n]);
        }
    }
    let k1 = params.kernel1.as_slice().expect("contiguous kernel");
    let k2 = params.kernel2.as_slice().expect("contiguous kernel");
    conv3x3_into(src, h, w, n, k1, dst, p, base);
    conv3x3_into(src, h, w, n, k2, dst, p, base + n);
}

/// Perception tensor for a whole grid, shape (H, W, perception_channels).
pub fn perceive(state: &GridState, params: &NcaParams) -> Result<Array3<f64>> {
    check_state_params(state, params)?;
    if !state.is_finite() {
        return Err(Error::NonFinite {
            context: "perceive input",
            step: 0,
        });
    }
    let (h, w, _) = state.values.dim();
    let mut percep = Array2::zeros((h * w, params.dims.perception_channels()));
    perceive_into(state, params, &mut percep);
    Ok(percep
        .into_shape_with_order((h, w, params.dims.perception_channels()))
        .expect("shape"))
}

/// Hidden layer: relu(percep . W1^T + b1), evaluated in place over `hidden`.
fn update_hidden(params: &NcaParams, percep: &Array2<f64>, hidden: &mut Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, percep, &params.update_w1.t(), 0.0, hidden);
    let b1 = params.update_b1.as_slice().expect("contiguous");
    for mut row in hidden.rows_mut() {
        let r = row.as_slice_mut().expect("contiguous");
        for (v, b) in r.iter_mut().zip(b1) {
            *v = (*v + b).max(0.0);
        }
    }
}

/// Residual update proposals: hidden . W2^T + b2.
fn update_output(params: &NcaParams, hidden: &Array2<f64>, update: &mut Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, hidden, &params.update_w2.t(), 0.0, update);
    let b2 = params.update_b2.as_slice().expect("contiguous");
    for mut row in update.rows_mut() {
        let r = row.as_slice_mut().expect("contiguous");
        for (v, b) in r.iter_mut().zip(b2) {
            *v += b;
        }
    }
}

pub(crate) fn step_into(
    state: &GridState,
    params: &NcaParams,
    fire_mask: &FireMask,
    scratch: &mut StepScratch,
    dst: &mut Array3<f64>,
) {
    perceive_into(state, params, &mut scratch.percep);
    update_hidden(params, &scratch.percep, &mut scratch.hidden);
    update_output(params, &scratch.hidden, &mut scratch.update);

    let (_, _, n) = state.values.dim();
    let src = state.values.as_slice().expect("contiguous");
    let upd = scratch.update.as_slice().expect("contiguous");
    let out = dst.as_slice_mut().expect("contiguous");
    let fire = fire_mask.as_slice().expect("contiguous");
    for (cell, &f) in fire.iter().enumerate() {
        let s = &src[cell * n..(cell + 1) * n];
        let o = &mut out[cell * n..(cell + 1) * n];
        if f == 1.0 {
            let u = &upd[cell * n..(cell + 1) * n];
            for c in 0..n {
                o[c] = s[c] + u[c];
            }
        } else {
            o.copy_from_slice(s);
        }
    }
}

fn check_fire_mask(state: &GridState, fire_mask: &FireMask) -> Result<()> {
    if fire_mask.dim() != (state.height(), state.width()) {
        return Err(Error::ShapeMismatch {
            context: "fire mask",
            expected: format!("{}x{}", state.height(), state.width()),
            actual: format!("{}x{}", fire_mask.dim().0, fire_mask.dim().1),
        });
    }
    if let Some(v) = fire_mask.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidDimensions(format!(
            "fire mask entries must be 0 or 1, got {v}"
        )));
    }
    Ok(())
}

/// One update step: `state + fire_mask * f_u(f_p(state))`. Cells with a zero
/// mask entry are bit-identical to the input.
pub fn step(state: &GridState, params: &NcaParams, fire_mask: &FireMask) -> Result<GridState> {
    check_state_params(state, params)?;
    check_fire_mask(state, fire_mask)?;
    let mut scratch = StepScratch::new(state.height(), state.width(), params);
    let mut dst = Array3::zeros(state.values.dim());
    step_into(state, params, fire_mask, &mut scratch, &mut dst);
    GridState::new(dst)
}

/// Sample one Bernoulli(fire_rate) mask in row-major cell order.
pub(crate) fn sample_fire_mask(h: usize, w: usize, fire_rate: f64, rng: &mut ChaCha8Rng) -> FireMask {
    let mut mask = Array2::zeros((h, w));
    for v in mask.iter_mut() {
        *v = if rng.gen::<f64>() < fire_rate { 1.0 } else { 0.0 };
    }
    mask
}

/// Roll the automaton forward for `steps` updates from the seeded image
/// state. Deterministic given identical inputs and seed.
pub fn rollout(
    image: &Array3<f64>,
    params: &NcaParams,
    steps: usize,
    fire_rate: f64,
    rng_seed: u64,
) -> Result<RolloutTrace> {
    if !(fire_rate > 0.0 && fire_rate <= 1.0) {
        return Err(Error::InvalidConfig {
            field: "fire_rate".to_string(),
            message: format!("must be in (0, 1], got {fire_rate}"),
        });
    }
    if steps < 1 {
        return Err(Error::InvalidConfig {
            field: "steps".to_string(),
            message: "must be >= 1".to_string(),
        });
    }
    let seed = seed_state(image, params.dims.channels)?;
    let (h, w) = (seed.height(), seed.width());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut scratch = StepScratch::new(h, w, params);
    let mut states = Vec::with_capacity(steps + 1);
    let mut fire_masks = Vec::with_capacity(steps);
    states.push(seed);
    for t in 0..steps {
        let mask = sample_fire_mask(h, w, fire_rate, &mut rng);
        let mut dst = Array3::zeros((h, w, params.dims.channels));
        step_into(states.last().unwrap(), params, &mask, &mut scratch, &mut dst);
        if dst.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "rollout state",
                step: t,
            });
        }
        states.push(GridState { values: dst });
        fire_masks.push(mask);
    }
    Ok(RolloutTrace { states, fire_masks })
}

/// Average pooling over the spatial dimensions: one mean per channel.
pub fn pool(state: &GridState) -> Array1<f64> {
    let (h, w, n) = state.values.dim();
    let src = state.values.as_slice().expect("contiguous");
    let mut acc = vec![0.0f64; n];
    for cell in 0..h * w {
        let s = &src[cell * n..(cell + 1) * n];
        for c in 0..n {
            acc[c] += s[c];
        }
    }
    let scale = 1.0 / (h * w) as f64;
    Array1::from_iter(acc.into_iter().map(|v| v * scale))
}

/// Classifier head hidden activations: relu(W1 . pooled + b1).
pub(crate) fn classifier_hidden(pooled: &ArrayView1<f64>, params: &NcaParams) -> Array1<f64> {
    let mut a = params.classifier_w1.dot(pooled);
    a += &params.classifier_b1;
    a.mapv_inplace(|v| v.max(0.0));
    a
}

/// Class logits for a pooled feature vector.
pub fn classify(pooled: &Array1<f64>, params: &NcaParams) -> Array1<f64> {
    let a = classifier_hidden(&pooled.view(), params);
    let mut logits = params.classifier_w2.dot(&a);
    logits += &params.classifier_b2;
    logits
}

/// Full forward pass: rollout, pool the final state, classify. Returns the
/// logits together with the final state for downstream mask extraction.
pub fn forward(
    image: &Array3<f64>,
    params: &NcaParams,
    steps: usize,
    fire_rate: f64,
    rng_seed: u64,
) -> Result<(Array1<f64>, GridState)> {
    let mut trace = rollout(image, params, steps, fire_rate, rng_seed)?;
    let final_state = trace.states.pop().expect("trace nonempty");
    let pooled = pool(&final_state);
    let logits = classify(&pooled, params);
    Ok((logits, final_state))
}
