//! `ncaseg`: one binary wiring the full pipeline. `synth` renders labelled
//! synthetic datasets, `train` fits the cellular-automaton classifier,
//! `segment` writes predicted masks, `eval` scores them against ground truth
//! (optionally as a full train x test grid).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Config
//! precedence: CLI flag > config file > built-in default; the effective
//! config is echoed into the output directory of every run.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncaseg_core::{
    classification_accuracy, evaluate, generate_synth, load_checkpoint, load_manifest,
    load_samples, merge_reports, predict_mask, save_checkpoint, save_mask, save_overlay,
    summary_table, train_fold_with, Aggregation, EvalReport, EvalSettings, Error, IouMode,
    KeyValueFile, Sample, SynthSpec, TrainConfig,
};

#[derive(Parser)]
#[command(name = "ncaseg", version, about = "Weakly supervised cell segmentation with a neural cellular automaton")]
struct Cli {
    /// Master seed; overrides the config file and checkpoint seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-image stages (1 = strictly sequential).
    /// Results are reduced in sample order, so output never depends on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-class dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Train the classifier on a labelled manifest, one model per fold.
    Train(TrainArgs),
    /// Extract predicted masks from a checkpoint.
    Segment(SegmentArgs),
    /// Score checkpoints against manifests with ground-truth masks.
    Eval(EvalArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct SynthArgs {
    /// Output directory; its name becomes the dataset name.
    #[arg(long, default_value = "synth_out")]
    out: PathBuf,
    /// Key-value config file (synth_* keys; flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_samples: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    radius_min: Option<f64>,
    #[arg(long)]
    radius_max: Option<f64>,
    /// Lower end of the nuisance-texture frequency range, cycles per image.
    #[arg(long)]
    freq_low: Option<f64>,
    /// Upper end of the nuisance-texture frequency range.
    #[arg(long)]
    freq_high: Option<f64>,
    /// Background noise amplitude.
    #[arg(long)]
    noise: Option<f64>,
    /// Brightness shift, for rendering a domain-shifted variant.
    #[arg(long)]
    brightness: Option<f64>,
    /// Hue rotation in degrees, for rendering a domain-shifted variant.
    #[arg(long)]
    hue_degrees: Option<f64>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct TrainArgs {
    /// Dataset manifest with image-level class labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Key-value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, logs and the effective config.
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
    /// Train only this fold index instead of all folds.
    #[arg(long)]
    fold: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Flag overrides for every trainable config field.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_epsilon: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    #[arg(long)]
    focal_alpha: Option<f64>,
    #[arg(long)]
    fire_rate: Option<f64>,
    #[arg(long)]
    nca_channels: Option<usize>,
    #[arg(long)]
    nca_hidden: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    classifier_hidden: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    perception_identity: Option<bool>,
    #[arg(long)]
    otsu_bins: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),+ $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })+
            };
        }
        set!(
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            lr_decay,
            batch_size,
            epochs,
            focal_gamma,
            focal_alpha,
            fire_rate,
            nca_channels,
            nca_hidden,
            steps,
            classifier_hidden,
            num_classes,
            image_size,
            folds,
            perception_identity,
            otsu_bins,
            checkpoint_every,
        );
    }
}

#[derive(Args)]
struct SegmentArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of images to segment.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "segment_out")]
    out: PathBuf,
    /// Also write boundary overlays next to the masks.
    #[arg(long)]
    overlay: bool,
    #[command(flatten)]
    overrides: EvalOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint; repeat for several runs (e.g. one per fold).
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Test manifest with ground-truth masks; repeat for several datasets.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    /// Emit the full train x test grid, one row per checkpoint.
    #[arg(long)]
    cross: bool,
    /// Training-dataset label for the checkpoints (default-mode rows).
    #[arg(long, default_value = "model")]
    train_name: String,
    /// Compare the summary against a reference "MEAN,STD" (in percent).
    #[arg(long)]
    reference: Option<String>,
    #[command(flatten)]
    overrides: EvalOverrides,
}

/// Evaluation-time overrides shared by `segment` and `eval`. Defaults come
/// from the checkpoint's embedded training config.
#[derive(Args)]
struct EvalOverrides {
    /// Rollout steps at inference time.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    fire_rate: Option<f64>,
    #[arg(long)]
    otsu_bins: Option<usize>,
    /// Keep only the largest connected component of each mask.
    #[arg(long)]
    largest_component: bool,
    /// IoU variant: foreground only, or averaged with the background class.
    #[arg(long, value_enum, default_value_t = IouModeArg::Foreground)]
    iou_mode: IouModeArg,
    /// Mean of per-image IoUs, or one IoU over pooled pixel counts.
    #[arg(long, value_enum, default_value_t = AggregateArg::PerImage)]
    aggregate: AggregateArg,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum IouModeArg {
    Foreground,
    Macro,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AggregateArg {
    PerImage,
    Pooled,
}

impl EvalOverrides {
    fn settings(&self, cfg: &TrainConfig, seed: Option<u64>, jobs: Option<usize>) -> EvalSettings {
        let mut s = EvalSettings::from_config(cfg);
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = self.fire_rate {
            s.fire_rate = v;
        }
        if let Some(v) = self.otsu_bins {
            s.otsu_bins = v;
        }
        if let Some(v) = seed {
            s.seed = v;
        }
        if let Some(v) = jobs {
            s.jobs = v.max(1);
        }
        s.largest_component = self.largest_component;
        s.iou_mode = match self.iou_mode {
            IouModeArg::Foreground => IouMode::Foreground,
            IouModeArg::Macro => IouMode::Macro,
        };
        s.aggregation = match self.aggregate {
            AggregateArg::PerImage => Aggregation::PerImage,
            AggregateArg::Pooled => Aggregation::Pooled,
        };
        s
    }
}

/// Usage errors exit 2, runtime failures exit 1.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::InvalidConfig { .. } | Error::Manifest { .. } => CliError::Usage(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn runtime(message: impl Into<String>) -> CliError {
    CliError::Runtime(message.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args, cli.seed),
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Segment(args) => cmd_segment(args, cli.seed, cli.jobs),
        Command::Eval(args) => cmd_eval(args, cli.seed, cli.jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(message)) => {
            eprintln!("usage error: {message}");
            ExitCode::from(2)
        }
    }
}

/// Input files are checked before any work starts or output is created.
fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn create_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_synth(args: &SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = SynthSpec::default();
    if let Some(path) = &args.config {
        require_file(path, "config file")?;
        // A shared config file may also carry train_* keys; let a scratch
        // TrainConfig claim those so they are not flagged as unknown.
        let mut train_keys = TrainConfig::default();
        KeyValueFile::load(path)?.apply(&mut [&mut spec, &mut train_keys])?;
    }
    macro_rules! set {
        ($($field:ident),+ $(,)?) => {
            $(if let Some(v) = args.$field { spec.$field = v; })+
        };
    }
    set!(
        num_samples,
        image_size,
        num_classes,
        radius_min,
        radius_max,
        freq_low,
        freq_high,
        noise,
        brightness,
        hue_degrees,
    );
    if let Some(v) = seed {
        spec.seed = v;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let manifest = generate_synth(&spec, &args.out)?;
    write_text(&args.out.join("synth_config.txt"), &spec.to_key_value_string())?;
    println!(
        "wrote {} samples to {}",
        manifest.entries.len(),
        args.out.join("manifest.csv").display()
    );
    Ok(())
}

fn load_train_config(
    config: &Option<PathBuf>,
    overrides: &TrainOverrides,
    seed: Option<u64>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        require_file(path, "config file")?;
        // Claim synth_* keys from shared files without acting on them.
        let mut synth_keys = SynthSpec::default();
        KeyValueFile::load(path)?.apply(&mut [&mut cfg, &mut synth_keys])?;
    }
    overrides.apply(&mut cfg);
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    require_file(&args.manifest, "manifest")?;
    let cfg = load_train_config(&args.config, &args.overrides, seed)?;
    let manifest = load_manifest(&args.manifest)?;
    let samples = load_samples(&manifest, cfg.image_size)?;

    let fold_indices: Vec<usize> = match args.fold {
        Some(k) if k >= cfg.folds => {
            return Err(usage(format!("--fold {k} out of range for {} folds", cfg.folds)));
        }
        Some(k) => vec![k],
        None => (0..cfg.folds).collect(),
    };

    create_out_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &cfg.to_key_value_string())?;

    for &fold in &fold_indices {
        let fold_dir = args.out.join(format!("fold{fold}"));
        create_out_dir(&fold_dir)?;
        let log_path = fold_dir.join("train_log.jsonl");
        let mut log_file = fs::File::create(&log_path)
            .map_err(|e| runtime(format!("cannot create {}: {e}", log_path.display())))?;

        let outcome = train_fold_with(&samples, fold, &cfg, |record, params| {
            let line = serde_json::to_string(record).expect("log record serializes");
            writeln!(log_file, "{line}").map_err(|e| Error::Io {
                path: log_path.display().to_string(),
                source: e,
            })?;
            if cfg.checkpoint_every > 0 && (record.epoch + 1) % cfg.checkpoint_every == 0 {
                let path = fold_dir.join(format!("checkpoint_epoch{}.ckpt", record.epoch));
                save_checkpoint(&path, params, &cfg, None)?;
            }
            Ok(())
        })?;

        let model_path = fold_dir.join("model.ckpt");
        save_checkpoint(&model_path, &outcome.params, &cfg, None)?;

        let val: Vec<Sample> = outcome
            .val_indices
            .iter()
            .map(|&i| samples[i].clone())
            .collect();
        let val_accuracy = classification_accuracy(&outcome.params, &val, &cfg)?;
        let last = outcome.log.last().expect("at least one epoch");
        println!(
            "fold {fold}: {} epochs, loss {:.4}, train acc {:.3}, val acc {:.3}, saved {}",
            outcome.log.len(),
            last.loss,
            last.accuracy,
            val_accuracy,
            model_path.display()
        );
    }
    Ok(())
}

fn cmd_segment(args: &SegmentArgs, seed: Option<u64>, jobs: Option<usize>) -> Result<(), CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.manifest, "manifest")?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let settings = args.overrides.settings(&checkpoint.config, seed, jobs);

    let manifest = load_manifest(&args.manifest)?;
    let samples = load_samples(&manifest, checkpoint.config.image_size)?;

    let mask_dir = args.out.join("masks");
    create_out_dir(&mask_dir)?;
    let overlay_dir = args.out.join("overlays");
    if args.overlay {
        create_out_dir(&overlay_dir)?;
    }
    write_text(&args.out.join("config.txt"), &checkpoint.config.to_key_value_string())?;

    let params = &checkpoint.params;
    let extracted = ncaseg_core::parallel::map_indexed(&samples, settings.jobs, |index, sample| {
        predict_mask(params, &sample.image, &settings, index)
    });

    let mut degenerate = 0usize;
    for (sample, result) in samples.iter().zip(extracted) {
        let prediction = result?;
        if prediction.degenerate {
            degenerate += 1;
            log::warn!("sample {} produced a degenerate (empty) mask", sample.id);
        }
        save_mask(&mask_dir.join(format!("{}.png", sample.id)), &prediction.mask)?;
        if args.overlay {
            save_overlay(
                &overlay_dir.join(format!("{}.png", sample.id)),
                &sample.image,
                &prediction.mask,
            )?;
        }
    }
    println!(
        "wrote {} masks ({} degenerate) to {}",
        samples.len(),
        degenerate,
        mask_dir.display()
    );
    Ok(())
}

fn parse_reference(raw: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = raw.split(',').collect();
    let err = || usage(format!("--reference expects \"MEAN,STD\", got `{raw}`"));
    if parts.len() != 2 {
        return Err(err());
    }
    let mean: f64 = parts[0].trim().parse().map_err(|_| err())?;
    let std: f64 = parts[1].trim().parse().map_err(|_| err())?;
    Ok((mean, std))
}

fn cmd_eval(args: &EvalArgs, seed: Option<u64>, jobs: Option<usize>) -> Result<(), CliError> {
    for path in &args.checkpoint {
        require_file(path, "checkpoint")?;
    }
    for path in &args.manifest {
        require_file(path, "manifest")?;
    }
    let reference = args.reference.as_deref().map(parse_reference).transpose()?;

    let checkpoints: Vec<_> = args
        .checkpoint
        .iter()
        .map(|path| load_checkpoint(path).map(|c| (file_stem(path), c)))
        .collect::<Result<_, _>>()?;
    let manifests: Vec<_> = args
        .manifest
        .iter()
        .map(|path| load_manifest(path))
        .collect::<Result<_, _>>()?;

    let report_dir = args.out.join("reports");
    create_out_dir(&report_dir)?;

    // Images are resized to each checkpoint's training resolution; cache per
    // (manifest, size) so repeated checkpoints do not reload from disk.
    let mut sample_cache: HashMap<(usize, usize), Vec<Sample>> = HashMap::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for (stem, checkpoint) in &checkpoints {
        let settings = args.overrides.settings(&checkpoint.config, seed, jobs);
        let train_dataset = if args.cross { stem.as_str() } else { args.train_name.as_str() };
        for (m_index, manifest) in manifests.iter().enumerate() {
            let size = checkpoint.config.image_size;
            let samples = match sample_cache.entry((m_index, size)) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(load_samples(manifest, size)?)
                }
            };
            let run_id = format!("{stem}_on_{}", manifest.dataset);
            let report = evaluate(
                &checkpoint.params,
                samples,
                &settings,
                &run_id,
                train_dataset,
                &manifest.dataset,
            )?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_text(&report_dir.join(format!("{run_id}.json")), &json)?;
            let mut lines = String::new();
            for (id, iou) in &report.per_image_iou {
                lines.push_str(&serde_json::json!({ "id": id, "iou": iou }).to_string());
                lines.push('\n');
            }
            write_text(&report_dir.join(format!("{run_id}.jsonl")), &lines)?;
            reports.push(report);
        }
    }

    // Group runs by dataset pair, preserving first-seen order.
    let mut pair_order: Vec<(String, String)> = Vec::new();
    for r in &reports {
        let key = (r.train_dataset.clone(), r.test_dataset.clone());
        if !pair_order.contains(&key) {
            pair_order.push(key);
        }
    }
    let merged: Vec<_> = pair_order
        .iter()
        .map(|(train, test)| {
            let group: Vec<EvalReport> = reports
                .iter()
                .filter(|r| &r.train_dataset == train && &r.test_dataset == test)
                .cloned()
                .collect();
            merge_reports(&group)
        })
        .collect::<Result<_, _>>()?;

    let table = summary_table(&merged);
    print!("{table}");
    for m in &merged {
        println!(
            "{} -> {}: IoU {:.3} +/- {:.3} over {} run(s)",
            m.train_dataset,
            m.test_dataset,
            m.mean_iou,
            m.std_iou,
            m.run_means.len()
        );
    }
    let mut summary = table.clone();
    if let Some((ref_mean, ref_std)) = reference {
        // Reference figures are quoted in percent.
        let first = &merged[0];
        let line = format!(
            "reference {:.1} +/- {:.1}; this run ({} -> {}): {:.1} +/- {:.1}",
            ref_mean,
            ref_std,
            first.train_dataset,
            first.test_dataset,
            100.0 * first.mean_iou,
            100.0 * first.std_iou,
        );
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    write_text(&args.out.join("summary.txt"), &summary)?;

    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    if skipped > 0 {
        return Err(runtime(format!(
            "{skipped} sample evaluation(s) skipped for lack of a ground-truth mask"
        )));
    }
    Ok(())
}
