//! Cell-state grid: the H x W x n tensor the automaton evolves.

use crate::error::{Error, Result};
use ndarray::{Array3, ArrayView2, ArrayView3};

/// Minimum channel count: 3 image channels plus at least one hidden channel.
pub const MIN_CHANNELS: usize = 4;

/// Full cell state of the automaton at one time step.
///
/// Layout is `(height, width, channels)` in row-major order, so each cell's
/// channel vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub values: Array3<f64>,
}

impl GridState {
    /// Wrap an existing tensor, enforcing the dimension invariants.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, n) = values.dim();
        if h < 3 || w < 3 {
            return Err(Error::InvalidDimensions(format!(
                "grid must be at least 3x3, got {h}x{w}"
            )));
        }
        if n < MIN_CHANNELS {
            return Err(Error::InvalidDimensions(format!(
                "grid needs at least {MIN_CHANNELS} channels, got {n}"
            )));
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    /// One channel as an H x W view.
    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(2), c)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Build the initial state from an RGB image: channels 0..3 hold the image,
/// the remaining hidden channels start at zero.
pub fn seed_state(image: &Array3<f64>, channels: usize) -> Result<GridState> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::InvalidDimensions(format!(
            "seed image must have 3 channels, got {c}"
        )));
    }
    if channels < MIN_CHANNELS {
        return Err(Error::InvalidDimensions(format!(
            "channel count must be >= {MIN_CHANNELS}, got {channels}"
        )));
    }
    if let Some(v) = image.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidDimensions(format!(
            "seed image contains non-finite pixel value {v}"
        )));
    }
    let mut values = Array3::<f64>::zeros((h, w, channels));
    values
        .slice_mut(ndarray::s![.., .., 0..3])
        .assign(image);
    GridState::new(values)
}
