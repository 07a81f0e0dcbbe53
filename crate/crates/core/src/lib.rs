//! Weakly supervised white-blood-cell segmentation with a neural cellular
//! automaton: a classifier is trained from image-level labels only, and
//! binary masks are extracted from its final cell states by projecting onto
//! the leading principal component and thresholding with Otsu's method.

pub mod augment;
pub mod backward;
pub mod checkpoint;
pub mod config;
mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod loss;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod segment;
pub mod trainer;

pub use augment::{d4_image, d4_mask, random_variant, D4_VARIANTS};
pub use backward::{loss_and_gradients, ForwardSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{
    generate_synth, load_image, load_manifest, load_mask, load_samples, save_image,
    save_manifest, save_mask, save_overlay, ManifestEntry, SampleManifest, SynthSpec,
};
pub use config::{KeyValueFile, KeyedConfig, TrainConfig};
pub use error::{Error, Result};
pub use grid::{seed_state, GridState, MIN_CHANNELS};
pub use loss::{focal_loss, focal_loss_grad, softmax};
pub use model::{classify, forward, perceive, pool, rollout, step, FireMask, RolloutTrace};
pub use optim::AdamState;
pub use params::{GradientSet, NcaParams, ParamDims};
pub use segment::{
    covariance, extract_mask, largest_component, leading_pc, orient, otsu_threshold, project,
    BinaryMask, ExtractedMask, ResponseMap,
};
pub use eval::{
    cross_domain, evaluate, iou, iou_with_mode, merge_reports, predict_mask, summary_table,
    Aggregation, EvalReport, EvalSettings, IouMode, MergedReport, Sample,
};
pub use trainer::{
    classification_accuracy, fold_split, mix_seed, train_fold, train_fold_with, TrainLogRecord,
    TrainOutcome,
};
