//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the model, training, segmentation and data layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {context} at rollout step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("invalid config value for `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("sample {id} has no class label but one is required here")]
    MissingLabel { id: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },

    #[error("empty fold: fold {fold} of {folds} has no training samples")]
    EmptyFold { fold: usize, folds: usize },

    #[error("manifest error in {path}: {message}")]
    Manifest { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported image {path}: {message}")]
    UnsupportedImage { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
