//! Learnable parameters: perception kernels, update network, classifier head.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shape metadata shared by parameters, gradients and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamDims {
    /// State channels per cell (n).
    pub channels: usize,
    /// Hidden width of the update network.
    pub hidden: usize,
    /// Hidden width of the classifier head.
    pub classifier_hidden: usize,
    pub num_classes: usize,
    /// Whether the raw state is concatenated into the perception vector.
    pub perception_identity: bool,
}

impl ParamDims {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            channels: cfg.nca_channels,
            hidden: cfg.nca_hidden,
            classifier_hidden: cfg.classifier_hidden,
            num_classes: cfg.num_classes,
            perception_identity: cfg.perception_identity,
        }
    }

    /// Width of the perception vector per cell: 3n with the identity
    /// concatenation, 2n without.
    pub fn perception_channels(&self) -> usize {
        (2 + usize::from(self.perception_identity)) * self.channels
    }
}

/// All learnable weights. Gradients reuse the same container shape-for-shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NcaParams {
    pub dims: ParamDims,
    /// First depthwise 3x3 perception kernel, shape (3, 3, n).
    pub kernel1: Array3<f64>,
    /// Second depthwise 3x3 perception kernel, shape (3, 3, n).
    pub kernel2: Array3<f64>,
    /// Update net layer 1, shape (hidden, perception_channels).
    pub update_w1: Array2<f64>,
    pub update_b1: Array1<f64>,
    /// Update net layer 2, shape (n, hidden).
    pub update_w2: Array2<f64>,
    pub update_b2: Array1<f64>,
    /// Classifier layer 1, shape (classifier_hidden, n).
    pub classifier_w1: Array2<f64>,
    pub classifier_b1: Array1<f64>,
    /// Classifier layer 2, shape (num_classes, classifier_hidden).
    pub classifier_w2: Array2<f64>,
    pub classifier_b2: Array1<f64>,
}

/// Gradients are shape-congruent with the parameters they differentiate.
pub type GradientSet = NcaParams;

/// Sobel-x kernel scaled by 1/8, the classic automaton perception prior.
const SOBEL_X: [[f64; 3]; 3] = [
    [-0.125, 0.0, 0.125],
    [-0.25, 0.0, 0.25],
    [-0.125, 0.0, 0.125],
];

impl NcaParams {
    /// All-zero parameters (used for gradient accumulators).
    pub fn zeros(dims: ParamDims) -> Self {
        let n = dims.channels;
        let p = dims.perception_channels();
        let h = dims.hidden;
        let hc = dims.classifier_hidden;
        let k = dims.num_classes;
        Self {
            dims,
            kernel1: Array3::zeros((3, 3, n)),
            kernel2: Array3::zeros((3, 3, n)),
            update_w1: Array2::zeros((h, p)),
            update_b1: Array1::zeros(h),
            update_w2: Array2::zeros((n, h)),
            update_b2: Array1::zeros(n),
            classifier_w1: Array2::zeros((hc, n)),
            classifier_b1: Array1::zeros(hc),
            classifier_w2: Array2::zeros((k, hc)),
            classifier_b2: Array1::zeros(k),
        }
    }

    /// Seeded initialization: Sobel-x / Sobel-y perception kernels, dense
    /// layers uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
    pub fn init(dims: ParamDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(dims);
        for c in 0..dims.channels {
            for (di, row) in SOBEL_X.iter().enumerate() {
                for (dj, &v) in row.iter().enumerate() {
                    params.kernel1[[di, dj, c]] = v;
                    // Sobel-y is the transpose of Sobel-x.
                    params.kernel2[[dj, di, c]] = v;
                }
            }
        }
        fill_uniform(&mut params.update_w1, &mut rng);
        fill_uniform(&mut params.update_w2, &mut rng);
        fill_uniform(&mut params.classifier_w1, &mut rng);
        fill_uniform(&mut params.classifier_w2, &mut rng);
        params
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.field_slices().iter().map(|s| s.len()).sum()
    }

    /// Field names paired with their dimension lists, in serialization order.
    pub fn field_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("kernel1", self.kernel1.shape().to_vec()),
            ("kernel2", self.kernel2.shape().to_vec()),
            ("update_w1", self.update_w1.shape().to_vec()),
            ("update_b1", self.update_b1.shape().to_vec()),
            ("update_w2", self.update_w2.shape().to_vec()),
            ("update_b2", self.update_b2.shape().to_vec()),
            ("classifier_w1", self.classifier_w1.shape().to_vec()),
            ("classifier_b1", self.classifier_b1.shape().to_vec()),
            ("classifier_w2", self.classifier_w2.shape().to_vec()),
            ("classifier_b2", self.classifier_b2.shape().to_vec()),
        ]
    }

    /// Every tensor as a flat slice, in the fixed serialization order.
    pub fn field_slices(&self) -> [&[f64]; 10] {
        [
            self.kernel1.as_slice().expect("contiguous"),
            self.kernel2.as_slice().expect("contiguous"),
            self.update_w1.as_slice().expect("contiguous"),
            self.update_b1.as_slice().expect("contiguous"),
            self.update_w2.as_slice().expect("contiguous"),
            self.update_b2.as_slice().expect("contiguous"),
            self.classifier_w1.as_slice().expect("contiguous"),
            self.classifier_b1.as_slice().expect("contiguous"),
            self.classifier_w2.as_slice().expect("contiguous"),
            self.classifier_b2.as_slice().expect("contiguous"),
        ]
    }

    pub fn field_slices_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.kernel1.as_slice_mut().expect("contiguous"),
            self.kernel2.as_slice_mut().expect("contiguous"),
            self.update_w1.as_slice_mut().expect("contiguous"),
            self.update_b1.as_slice_mut().expect("contiguous"),
            self.update_w2.as_slice_mut().expect("contiguous"),
            self.update_b2.as_slice_mut().expect("contiguous"),
            self.classifier_w1.as_slice_mut().expect("contiguous"),
            self.classifier_b1.as_slice_mut().expect("contiguous"),
            self.classifier_w2.as_slice_mut().expect("contiguous"),
            self.classifier_b2.as_slice_mut().expect("contiguous"),
        ]
    }

    /// Concatenate all tensors into one flat vector (serialization order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for s in self.field_slices() {
            flat.extend_from_slice(s);
        }
        flat
    }

    /// Rebuild parameters from a flat vector produced by [`Self::to_flat`].
    pub fn from_flat(dims: ParamDims, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(dims);
        let expected = params.num_params();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "from_flat",
                expected: expected.to_string(),
                actual: flat.len().to_string(),
            });
        }
        let mut offset = 0;
        for dst in params.field_slices_mut() {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(params)
    }

    /// `self += other` elementwise across every tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let others = other.field_slices();
        for (dst, src) in self.field_slices_mut().into_iter().zip(others) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    /// `self *= factor` elementwise across every tensor.
    pub fn scale(&mut self, factor: f64) {
        for dst in self.field_slices_mut() {
            for d in dst.iter_mut() {
                *d *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.field_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn fill_uniform<D: ndarray::Dimension>(w: &mut ndarray::Array<f64, D>, rng: &mut ChaCha8Rng) {
    let fan_in = w.shape().last().copied().unwrap_or(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in w.iter_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}
