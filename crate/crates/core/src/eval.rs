//! IoU metrics, per-dataset aggregation, run merging with sample standard
//! deviation, and the train-by-test cross-domain grid.

use crate::error::{Error, Result};
use crate::model::forward;
use crate::params::NcaParams;
use crate::segment::{extract_mask, BinaryMask};
use crate::trainer::mix_seed;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// How a predicted/truth mask pair is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouMode {
    /// IoU of the foreground class only (the usual binary-mask convention).
    Foreground,
    /// Mean of foreground IoU and background IoU.
    Macro,
}

/// How per-image scores become a dataset score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Mean of per-image IoU values.
    PerImage,
    /// Pool intersection/union pixel counts over the whole dataset first.
    Pooled,
}

/// One sample ready for evaluation or training: decoded image plus
/// whatever supervision the manifest provided.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub label: Option<usize>,
    pub mask: Option<BinaryMask>,
}

/// Evaluation result over one dataset with one set of parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub train_dataset: String,
    pub test_dataset: String,
    /// (sample id, IoU), ordered by sample id.
    pub per_image_iou: Vec<(String, f64)>,
    pub mean_iou: f64,
    pub std_iou: f64,
    /// Samples skipped because no ground-truth mask was available.
    pub skipped: usize,
    /// Predictions that came back degenerate (flagged, still scored).
    pub degenerate: usize,
}

/// Aggregate of several single-run reports on the same dataset pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedReport {
    pub train_dataset: String,
    pub test_dataset: String,
    pub run_means: Vec<f64>,
    /// Mean over run means.
    pub mean_iou: f64,
    /// Sample standard deviation over run means; 0.0 for a single run.
    pub std_iou: f64,
    pub single_run: bool,
}

/// Intersection over union of two same-shape masks. Two empty masks agree
/// perfectly and score 1.0.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            context: "iou masks",
            expected: format!("{}x{}", truth.dim().0, truth.dim().1),
            actual: format!("{}x{}", pred.dim().0, pred.dim().1),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (p, t) in pred.iter().zip(truth.iter()) {
        inter += (*p && *t) as u64;
        union += (*p || *t) as u64;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn complement(mask: &BinaryMask) -> BinaryMask {
    mask.mapv(|v| !v)
}

/// IoU under the requested mode.
pub fn iou_with_mode(pred: &BinaryMask, truth: &BinaryMask, mode: IouMode) -> Result<f64> {
    match mode {
        IouMode::Foreground => iou(pred, truth),
        IouMode::Macro => {
            let fg = iou(pred, truth)?;
            let bg = iou(&complement(pred), &complement(truth))?;
            Ok(0.5 * (fg + bg))
        }
    }
}

/// Rollout seed for evaluation of sample `index`; decoupled from the
/// training-time stream so train/eval order never interact.
pub fn eval_rollout_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, &[0x45764c, index as u64])
}

/// Extraction + scoring settings for one evaluation pass.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub steps: usize,
    pub fire_rate: f64,
    pub otsu_bins: usize,
    pub seed: u64,
    pub iou_mode: IouMode,
    pub aggregation: Aggregation,
    /// Keep only the largest connected component of each prediction.
    pub largest_component: bool,
    /// Worker threads for per-image prediction; results are reduced in
    /// sample order, so the count never changes the output.
    pub jobs: usize,
}

impl EvalSettings {
    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            steps: cfg.steps,
            fire_rate: cfg.fire_rate,
            otsu_bins: cfg.otsu_bins,
            seed: cfg.seed,
            iou_mode: IouMode::Foreground,
            aggregation: Aggregation::PerImage,
            largest_component: false,
            jobs: 1,
        }
    }
}

/// Predict a mask for one sample.
pub fn predict_mask(
    params: &NcaParams,
    image: &Array3<f64>,
    settings: &EvalSettings,
    sample_index: usize,
) -> Result<crate::segment::ExtractedMask> {
    let (_, state) = forward(
        image,
        params,
        settings.steps,
        settings.fire_rate,
        eval_rollout_seed(settings.seed, sample_index),
    )?;
    let mut out = extract_mask(&state, settings.otsu_bins)?;
    if settings.largest_component {
        out.mask = crate::segment::largest_component(&out.mask);
    }
    Ok(out)
}

/// Evaluate a parameter set over a dataset: per-image mask prediction and
/// IoU against ground truth. Samples without a mask are skipped with a
/// warning and counted. Per-image entries are ordered by sample id.
pub fn evaluate(
    params: &NcaParams,
    samples: &[Sample],
    settings: &EvalSettings,
    run_id: &str,
    train_dataset: &str,
    test_dataset: &str,
) -> Result<EvalReport> {
    enum Outcome {
        Skipped,
        Scored { score: f64, inter: u64, union: u64, degenerate: bool },
    }
    // prediction per sample is independent (the rollout seed depends only
    // on the sample index); assembly below is sequential in sample order
    let outcomes: Vec<Result<Outcome>> =
        crate::parallel::map_indexed(samples, settings.jobs, |index, sample| {
            let Some(truth) = &sample.mask else {
                return Ok(Outcome::Skipped);
            };
            let out = predict_mask(params, &sample.image, settings, index)?;
            let score = iou_with_mode(&out.mask, truth, settings.iou_mode)?;
            let mut inter = 0u64;
            let mut union = 0u64;
            for (p, t) in out.mask.iter().zip(truth.iter()) {
                inter += (*p && *t) as u64;
                union += (*p || *t) as u64;
            }
            Ok(Outcome::Scored { score, inter, union, degenerate: out.degenerate })
        });

    let mut per_image: Vec<(String, f64)> = Vec::new();
    let mut skipped = 0usize;
    let mut degenerate = 0usize;
    let mut inter_total = 0u64;
    let mut union_total = 0u64;
    for (sample, outcome) in samples.iter().zip(outcomes) {
        match outcome? {
            Outcome::Skipped => {
                log::warn!("sample {} has no ground-truth mask; skipped", sample.id);
                skipped += 1;
            }
            Outcome::Scored { score, inter, union, degenerate: d } => {
                degenerate += d as usize;
                inter_total += inter;
                union_total += union;
                per_image.push((sample.id.clone(), score));
            }
        }
    }
    per_image.sort_by(|a, b| a.0.cmp(&b.0));

    let mean = match settings.aggregation {
        Aggregation::PerImage => {
            if per_image.is_empty() {
                0.0
            } else {
                per_image.iter().map(|(_, v)| v).sum::<f64>() / per_image.len() as f64
            }
        }
        Aggregation::Pooled => {
            if union_total == 0 {
                1.0
            } else {
                inter_total as f64 / union_total as f64
            }
        }
    };
    let std = if per_image.len() < 2 {
        0.0
    } else {
        let m = per_image.iter().map(|(_, v)| v).sum::<f64>() / per_image.len() as f64;
        let ss: f64 = per_image.iter().map(|(_, v)| (v - m) * (v - m)).sum();
        (ss / (per_image.len() as f64 - 1.0)).sqrt()
    };
    Ok(EvalReport {
        run_id: run_id.to_string(),
        train_dataset: train_dataset.to_string(),
        test_dataset: test_dataset.to_string(),
        per_image_iou: per_image,
        mean_iou: mean,
        std_iou: std,
        skipped,
        degenerate,
    })
}

/// Merge single-run reports for the same (train, test) pair into a
/// mean +/- sample-std summary over the run means.
pub fn merge_reports(reports: &[EvalReport]) -> Result<MergedReport> {
    let Some(first) = reports.first() else {
        return Err(Error::DegenerateInput("no reports to merge".to_string()));
    };
    for r in reports {
        if r.train_dataset != first.train_dataset || r.test_dataset != first.test_dataset {
            return Err(Error::ShapeMismatch {
                context: "merge_reports dataset pair",
                expected: format!("{}->{}", first.train_dataset, first.test_dataset),
                actual: format!("{}->{}", r.train_dataset, r.test_dataset),
            });
        }
    }
    let run_means: Vec<f64> = reports.iter().map(|r| r.mean_iou).collect();
    let n = run_means.len() as f64;
    let mean = run_means.iter().sum::<f64>() / n;
    let std = if run_means.len() < 2 {
        0.0
    } else {
        let ss: f64 = run_means.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    };
    Ok(MergedReport {
        train_dataset: first.train_dataset.clone(),
        test_dataset: first.test_dataset.clone(),
        run_means,
        mean_iou: mean,
        std_iou: std,
        single_run: reports.len() == 1,
    })
}

/// Evaluate one trained parameter set against several test datasets: one
/// row of the cross-domain grid, in the given test order.
pub fn cross_domain(
    params: &NcaParams,
    train_dataset: &str,
    test_sets: &[(&str, &[Sample])],
    settings: &EvalSettings,
    run_id: &str,
) -> Result<Vec<EvalReport>> {
    test_sets
        .iter()
        .map(|(test_id, samples)| {
            evaluate(params, samples, settings, run_id, train_dataset, test_id)
        })
        .collect()
}

/// Human-readable grid of merged reports: rows = train dataset, columns =
/// test dataset, cells = "mean +/- std" in percent.
pub fn summary_table(merged: &[MergedReport]) -> String {
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for m in merged {
        if !rows.contains(&m.train_dataset.as_str()) {
            rows.push(&m.train_dataset);
        }
        if !cols.contains(&m.test_dataset.as_str()) {
            cols.push(&m.test_dataset);
        }
    }
    let cell = |tr: &str, te: &str| -> String {
        merged
            .iter()
            .find(|m| m.train_dataset == tr && m.test_dataset == te)
            .map(|m| format!("{:.1} +/- {:.1}", 100.0 * m.mean_iou, 100.0 * m.std_iou))
            .unwrap_or_else(|| "-".to_string())
    };
    let width = 18usize;
    let mut out = String::new();
    out.push_str(&format!("{:width$}", "train \\ test"));
    for c in &cols {
        out.push_str(&format!("{c:>width$}"));
    }
    out.push('\n');
    for r in &rows {
        out.push_str(&format!("{r:width$}"));
        for c in &cols {
            out.push_str(&format!("{:>width$}", cell(r, c)));
        }
        out.push('\n');
    }
    out
}
