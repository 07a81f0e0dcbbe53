//! Training configuration and the flat `key = value` config-file format.
//!
//! One file can carry both training keys and synth-generator keys; each
//! consumer claims the keys it owns and loading fails on keys nobody owns.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Every hyperparameter of the training pipeline, as explicit fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base Adam learning rate.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplicative learning-rate decay applied per optimizer step.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Focal loss focusing exponent.
    pub focal_gamma: f64,
    /// Focal loss scale factor (1.0 = unweighted).
    pub focal_alpha: f64,
    /// Probability that a cell fires (applies its update) each step.
    pub fire_rate: f64,
    /// State channels per cell (first 3 carry the image).
    pub nca_channels: usize,
    /// Hidden width of the per-cell update network.
    pub nca_hidden: usize,
    /// Rollout length T.
    pub steps: usize,
    /// Hidden width of the classifier head.
    pub classifier_hidden: usize,
    pub num_classes: usize,
    /// Working resolution; images are resized to image_size x image_size.
    pub image_size: usize,
    pub folds: usize,
    pub seed: u64,
    /// Concatenate the raw state into the perception vector (3n channels).
    /// When false, perception is the two kernel responses only (2n channels).
    pub perception_identity: bool,
    /// Histogram bins for Otsu thresholding during mask extraction.
    pub otsu_bins: usize,
    /// Save an intermediate checkpoint every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay: 0.9999,
            batch_size: 32,
            epochs: 128,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            fire_rate: 0.5,
            nca_channels: 32,
            nca_hidden: 32,
            steps: 32,
            classifier_hidden: 128,
            num_classes: 2,
            image_size: 64,
            folds: 5,
            seed: 0,
            perception_identity: true,
            otsu_bins: 256,
            checkpoint_every: 0,
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

impl TrainConfig {
    /// Validate every field against its allowed range.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad("learning_rate", "must be finite and > 0"));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(bad(name, "must be in [0, 1)"));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(bad("adam_epsilon", "must be finite and > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(bad("lr_decay", "must be in (0, 1]"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(bad("epochs", "must be >= 1"));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(bad("focal_gamma", "must be finite and >= 0"));
        }
        if !(self.focal_alpha.is_finite() && self.focal_alpha > 0.0) {
            return Err(bad("focal_alpha", "must be finite and > 0"));
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(bad("fire_rate", "must be in (0, 1]"));
        }
        if self.nca_channels < 4 {
            return Err(bad("nca_channels", "must be >= 4 (3 image channels + hidden)"));
        }
        if self.nca_hidden < 1 {
            return Err(bad("nca_hidden", "must be >= 1"));
        }
        if self.steps < 1 {
            return Err(bad("steps", "must be >= 1"));
        }
        if self.classifier_hidden < 1 {
            return Err(bad("classifier_hidden", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(bad("num_classes", "must be >= 2"));
        }
        if self.image_size < 3 {
            return Err(bad("image_size", "must be >= 3"));
        }
        if self.folds < 2 {
            return Err(bad("folds", "must be >= 2"));
        }
        if self.otsu_bins < 2 {
            return Err(bad("otsu_bins", "must be >= 2"));
        }
        Ok(())
    }

    /// Render as a `key = value` file (the same format `load` accepts).
    pub fn to_key_value_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_epsilon = {}", self.adam_epsilon);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "focal_gamma = {}", self.focal_gamma);
        let _ = writeln!(s, "focal_alpha = {}", self.focal_alpha);
        let _ = writeln!(s, "fire_rate = {}", self.fire_rate);
        let _ = writeln!(s, "nca_channels = {}", self.nca_channels);
        let _ = writeln!(s, "nca_hidden = {}", self.nca_hidden);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "classifier_hidden = {}", self.classifier_hidden);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "folds = {}", self.folds);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "perception_identity = {}", self.perception_identity);
        let _ = writeln!(s, "otsu_bins = {}", self.otsu_bins);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    /// Number of channels the perception vector has per cell.
    pub fn perception_channels(&self) -> usize {
        let per_kernel = 2;
        let identity = if self.perception_identity { 1 } else { 0 };
        (per_kernel + identity) * self.nca_channels
    }
}

impl KeyedConfig for TrainConfig {
    fn try_set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, raw)?,
            "adam_beta1" => self.adam_beta1 = parse(key, raw)?,
            "adam_beta2" => self.adam_beta2 = parse(key, raw)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, raw)?,
            "lr_decay" => self.lr_decay = parse(key, raw)?,
            "batch_size" => self.batch_size = parse(key, raw)?,
            "epochs" => self.epochs = parse(key, raw)?,
            "focal_gamma" => self.focal_gamma = parse(key, raw)?,
            "focal_alpha" => self.focal_alpha = parse(key, raw)?,
            "fire_rate" => self.fire_rate = parse(key, raw)?,
            "nca_channels" => self.nca_channels = parse(key, raw)?,
            "nca_hidden" => self.nca_hidden = parse(key, raw)?,
            "steps" => self.steps = parse(key, raw)?,
            "classifier_hidden" => self.classifier_hidden = parse(key, raw)?,
            "num_classes" => self.num_classes = parse(key, raw)?,
            "image_size" => self.image_size = parse(key, raw)?,
            "folds" => self.folds = parse(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "perception_identity" => self.perception_identity = parse(key, raw)?,
            "otsu_bins" => self.otsu_bins = parse(key, raw)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A config struct that can claim keys from a [`KeyValueFile`].
pub trait KeyedConfig {
    /// Set `key` from its raw string value. Ok(false) means the key is not
    /// owned by this config.
    fn try_set(&mut self, key: &str, raw: &str) -> Result<bool>;
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::InvalidConfig {
        field: key.to_string(),
        message: format!("cannot parse `{raw}`"),
    })
}

/// Flat `key = value` file. Lines starting with `#` and blank lines are ignored.
#[derive(Debug, Clone)]
pub struct KeyValueFile {
    pub pairs: Vec<(String, String)>,
}

impl KeyValueFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig {
                    field: format!("line {}", lineno + 1),
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Feed every pair to the given configs in order; the first config that
    /// claims a key wins. Unclaimed keys are an error.
    pub fn apply(&self, targets: &mut [&mut dyn KeyedConfig]) -> Result<()> {
        'pair: for (key, raw) in &self.pairs {
            for target in targets.iter_mut() {
                if target.try_set(key, raw)? {
                    continue 'pair;
                }
            }
            return Err(Error::InvalidConfig {
                field: key.clone(),
                message: "unknown config key".to_string(),
            });
        }
        Ok(())
    }
}
