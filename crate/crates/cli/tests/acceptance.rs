//! Acceptance suite: one test per release criterion, each printing a single
//! `[PASS]`/`[WARN]` line (run with `--nocapture` to see them). Criteria 6-8
//! share one 5-seed desk-scale experiment built on first use.
//!
//! The desk-scale hyperparameters (learning rate, batch size, epochs, noise
//! level) were calibrated once against the synthetic task and are frozen
//! here; the thresholds they must clear are stated inline.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncaseg_core::{
    classification_accuracy, covariance, evaluate, extract_mask, generate_synth, leading_pc,
    load_samples, loss_and_gradients, merge_reports, orient, otsu_threshold, predict_mask,
    project, rollout, save_checkpoint, save_mask, step, summary_table, train_fold, EvalReport,
    EvalSettings, FireMask, ForwardSpec, GridState, NcaParams, ParamDims, ResponseMap, Sample,
    SynthSpec, TrainConfig, TrainOutcome,
};
use ncaseg_oracles::{exhaustive_otsu, jacobi_eigen};

fn pass(criterion: usize, detail: &str) {
    println!("[PASS] criterion {criterion}: {detail}");
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>())
}

fn random_state(h: usize, w: usize, n: usize, rng: &mut ChaCha8Rng) -> GridState {
    GridState::new(Array3::from_shape_fn((h, w, n), |_| rng.gen::<f64>() * 2.0 - 1.0)).unwrap()
}

// --- criterion 1: analytic gradients vs central finite differences -------

fn fd_loss(
    flat: &[f64],
    dims: ParamDims,
    image: &Array3<f64>,
    target: usize,
    spec: &ForwardSpec,
    seed: u64,
) -> f64 {
    let p = NcaParams::from_flat(dims, flat).unwrap();
    let (loss, _, _) = loss_and_gradients(image, target, &p, spec, seed).unwrap();
    loss
}

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for case in 0..20u64 {
        let dims = ParamDims {
            channels: 4,
            hidden: 4,
            classifier_hidden: 5 + (case as usize % 4),
            num_classes: 2 + (case as usize % 2),
            perception_identity: case % 2 == 0,
        };
        let spec = ForwardSpec {
            steps: 3,
            fire_rate: 1.0,
            focal_gamma: [2.0, 0.0, 0.5][case as usize % 3],
            focal_alpha: [1.0, 0.25][case as usize % 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        // Start from the real initialization, then jitter every entry so no
        // parameter sits at a structural zero.
        let mut flat = NcaParams::init(dims, case).to_flat();
        for v in &mut flat {
            *v += rng.gen::<f64>() * 0.6 - 0.3;
        }
        let params = NcaParams::from_flat(dims, &flat).unwrap();
        let image = random_image(8, 8, &mut rng);
        let target = case as usize % dims.num_classes;
        let rollout_seed = 77 + case;

        let (_, _, grads) = loss_and_gradients(&image, target, &params, &spec, rollout_seed).unwrap();
        let gflat = grads.to_flat();
        let eps = 1e-5;
        for idx in 0..flat.len() {
            let mut plus = flat.clone();
            plus[idx] += eps;
            let mut minus = flat.clone();
            minus[idx] -= eps;
            let fd = (fd_loss(&plus, dims, &image, target, &spec, rollout_seed)
                - fd_loss(&minus, dims, &image, target, &spec, rollout_seed))
                / (2.0 * eps);
            let denom = fd.abs().max(gflat[idx].abs()).max(1e-6);
            let rel = (gflat[idx] - fd).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "config {case} param {idx}: analytic {} vs fd {fd} (rel {rel:.3e})",
                gflat[idx]
            );
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 60 s");
    pass(
        1,
        &format!(
            "20 tiny configs, {checked} parameters, max rel err {worst:.2e} (< 1e-4), {elapsed:.2?}"
        ),
    );
}

// --- criterion 2: power iteration vs dense eigendecomposition ------------

#[test]
fn criterion_2_pca_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst_rel: f64 = 0.0;
    let mut worst_cos: f64 = 1.0;
    for _ in 0..100 {
        // Uneven channel scales give a spread eigenspectrum.
        let scales: Vec<f64> = (0..8).map(|c| 0.2 + 0.5 * c as f64).collect();
        let state = GridState::new(Array3::from_shape_fn((16, 16, 8), |(_, _, c)| {
            (rng.gen::<f64>() * 2.0 - 1.0) * scales[c]
        }))
        .unwrap();
        let (sigma, _) = covariance(&state);
        let v = leading_pc(&sigma.view()).unwrap();

        let rayleigh = v.dot(&sigma.dot(&v)) / v.dot(&v);
        let (evals, evecs) = jacobi_eigen(&sigma);
        let (k, lambda) = evals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, l)| (k, *l))
            .unwrap();
        let u = evecs.column(k);

        let rel = (rayleigh - lambda).abs() / lambda.abs();
        let cos = v.dot(&u).abs() / (v.dot(&v).sqrt() * u.dot(&u).sqrt());
        worst_rel = worst_rel.max(rel);
        worst_cos = worst_cos.min(cos);
        assert!(rel <= 1e-8, "Rayleigh {rayleigh} vs dense {lambda} (rel {rel:.3e})");
        assert!(cos > 1.0 - 1e-8, "eigenvector cosine {cos}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget 10 s");
    pass(
        2,
        &format!(
            "100 states, worst Rayleigh rel err {worst_rel:.2e}, worst |cos| {worst_cos:.12}, {elapsed:.2?}"
        ),
    );
}

// --- criterion 3: Otsu vs exhaustive scan over every bin edge ------------

#[test]
fn criterion_3_otsu_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for case in 0..100 {
        let h = rng.gen_range(6..20);
        let w = rng.gen_range(6..20);
        let bimodal = case % 2 == 0;
        let values = Array2::from_shape_fn((h, w), |_| {
            if bimodal && rng.gen_bool(0.5) {
                0.6 + 0.2 * rng.gen::<f64>()
            } else {
                -0.8 + 0.4 * rng.gen::<f64>()
            }
        });
        let flat: Vec<f64> = values.iter().copied().collect();
        let map = ResponseMap { values };
        let tau = otsu_threshold(&map, 256).unwrap();
        let oracle = exhaustive_otsu(&flat, 256).unwrap();
        assert_eq!(
            tau.to_bits(),
            oracle.to_bits(),
            "case {case}: otsu {tau} vs exhaustive {oracle}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 5, "took {elapsed:?}, budget 5 s");
    pass(3, &format!("100 maps, thresholds bit-equal to the exhaustive scan, {elapsed:.2?}"));
}

// --- criterion 4: forward-dynamics invariants -----------------------------

fn tiny_params(seed: u64) -> NcaParams {
    NcaParams::init(
        ParamDims {
            channels: 4,
            hidden: 8,
            classifier_hidden: 8,
            num_classes: 2,
            perception_identity: true,
        },
        seed,
    )
}

#[test]
fn criterion_4_forward_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);

    // Masked no-op: a zero fire mask leaves the state bit-identical.
    let params = tiny_params(1);
    for _ in 0..20 {
        let state = random_state(9, 7, 4, &mut rng);
        let zeros = FireMask::zeros((9, 7));
        let next = step(&state, &params, &zeros).unwrap();
        assert_eq!(state.values, next.values, "zero mask must be a no-op");
    }

    // Locality: a single-pixel change can spread at most one cell per step.
    let image = random_image(12, 12, &mut rng);
    let mut poked = image.clone();
    poked[[5, 7, 1]] += 0.25;
    let steps = 3;
    let a = rollout(&image, &params, steps, 1.0, 5).unwrap();
    let b = rollout(&poked, &params, steps, 1.0, 5).unwrap();
    for t in 0..=steps {
        let diff = &b.states[t].values - &a.states[t].values;
        for ((i, j, _), d) in diff.indexed_iter() {
            let dist = (i as isize - 5).abs().max((j as isize - 7).abs()) as usize;
            assert!(
                *d == 0.0 || dist <= t,
                "step {t}: change escaped the light cone at ({i},{j})"
            );
        }
    }

    // Interior translation equivariance (replicate padding never reaches
    // cells at least `steps` away from every border).
    let base = random_image(16, 16, &mut rng);
    let (dy, dx) = (1usize, 2usize);
    let mut shifted = random_image(16, 16, &mut rng);
    for i in 0..16 {
        for j in 0..16 {
            for c in 0..3 {
                if i >= dy && j >= dx {
                    shifted[[i, j, c]] = base[[i - dy, j - dx, c]];
                }
            }
        }
    }
    let ta = rollout(&base, &params, steps, 1.0, 9).unwrap();
    let tb = rollout(&shifted, &params, steps, 1.0, 9).unwrap();
    let mut compared = 0usize;
    let fa = ta.final_state();
    let fb = tb.final_state();
    for i in steps..16 - steps {
        for j in steps..16 - steps {
            if i >= dy && j >= dx && i - dy >= steps && j - dx >= steps {
                for c in 0..4 {
                    assert_eq!(
                        fa.values[[i - dy, j - dx, c]],
                        fb.values[[i, j, c]],
                        "interior cells must translate exactly"
                    );
                }
                compared += 1;
            }
        }
    }
    assert!(compared > 20, "interior region too small to be meaningful");

    // Fire-rate concentration over >= 1e5 cell-steps.
    let big = random_image(64, 64, &mut rng);
    let trace = rollout(&big, &params, 32, 0.5, 4242).unwrap();
    let cell_steps = 64 * 64 * 32;
    assert!(cell_steps >= 100_000);
    let fired: f64 = trace.fire_masks.iter().map(|m| m.sum()).sum();
    let fraction = fired / cell_steps as f64;
    let sigma = (0.25 / cell_steps as f64).sqrt();
    assert!(
        (fraction - 0.5).abs() <= 3.0 * sigma,
        "fired fraction {fraction} outside 3 sigma of 0.5"
    );

    // Determinism: same seed, same bits; different seed, different firing.
    let r1 = rollout(&image, &params, 8, 0.5, 123).unwrap();
    let r2 = rollout(&image, &params, 8, 0.5, 123).unwrap();
    for (s1, s2) in r1.states.iter().zip(&r2.states) {
        assert_eq!(s1.values, s2.values);
    }
    let r3 = rollout(&image, &params, 8, 0.5, 124).unwrap();
    assert!(
        r1.fire_masks
            .iter()
            .zip(&r3.fire_masks)
            .any(|(a, b)| a != b),
        "different seeds should fire differently"
    );

    pass(
        4,
        &format!(
            "no-op, light cone, translation ({compared} cells), fire fraction {fraction:.4}, determinism"
        ),
    );
}

// --- criterion 5: mask invariance under affine scaling and PC sign --------

#[test]
fn criterion_5_mask_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let state = random_state(12, 12, 6, &mut rng);
        let blessed = extract_mask(&state, 256).unwrap();

        // Uniform positive scale plus a per-channel offset.
        let a = 0.25 + 3.75 * rng.gen::<f64>();
        let offsets: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let scaled = GridState::new(Array3::from_shape_fn((12, 12, 6), |(i, j, c)| {
            a * state.values[[i, j, c]] + offsets[c]
        }))
        .unwrap();
        let transformed = extract_mask(&scaled, 256).unwrap();
        assert_eq!(blessed.mask, transformed.mask, "case {case}: affine scaling changed the mask");
        assert_eq!(blessed.degenerate, transformed.degenerate);

        // Sign canonicalization: feeding the negated eigenvector through the
        // orientation step must reproduce the same mask.
        let (sigma, mean) = covariance(&state);
        let v = leading_pc(&sigma.view()).unwrap();
        let flipped: Array1<f64> = v.mapv(|x| -x);
        let oriented = orient(flipped, &state, &mean);
        let response = project(&state, &oriented, &mean);
        let tau = otsu_threshold(&response, 256).unwrap();
        let mask = response.values.mapv(|x| x > tau);
        assert_eq!(blessed.mask, mask, "case {case}: sign flip changed the mask");
    }
    pass(5, "50 states: affine channel scaling and PC sign flips leave masks bit-identical");
}

// --- criteria 6-8: shared desk-scale experiment ---------------------------

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DESK_EPOCHS: usize = 12;
const ACCURACY_FLOOR: f64 = 0.90;
const IOU_FLOOR: f64 = 0.70;

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 16,
        epochs: DESK_EPOCHS,
        learning_rate: 1e-3,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn desk_synth(samples: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        num_samples: samples,
        noise: 0.01,
        seed,
        ..SynthSpec::default()
    }
}

struct SeedRun {
    seed: u64,
    accuracy: f64,
    report_a: EvalReport,
    report_b: EvalReport,
    checkpoint_bytes: Vec<u8>,
    mask_bytes: Vec<(String, Vec<u8>)>,
    report_json: String,
}

struct Experiment {
    train: Vec<Sample>,
    test_a: Vec<Sample>,
    test_b: Vec<Sample>,
    runs: Vec<SeedRun>,
    build_seconds: f64,
}

fn run_seed(exp_dir: &std::path::Path, train: &[Sample], test_a: &[Sample], test_b: &[Sample], seed: u64) -> SeedRun {
    let cfg = desk_config(seed);
    let outcome: TrainOutcome = train_fold(train, 0, &cfg).expect("training completes");
    let accuracy = classification_accuracy(&outcome.params, test_a, &cfg).unwrap();
    let settings = EvalSettings::from_config(&cfg);
    let run_id = format!("seed{seed}");
    let report_a = evaluate(&outcome.params, test_a, &settings, &run_id, "synthA", "synthA_test").unwrap();
    let report_b = evaluate(&outcome.params, test_b, &settings, &run_id, "synthA", "synthB_test").unwrap();

    let ckpt_path = exp_dir.join(format!("seed{seed}.ckpt"));
    save_checkpoint(&ckpt_path, &outcome.params, &cfg, None).unwrap();
    let checkpoint_bytes = std::fs::read(&ckpt_path).unwrap();

    let mut mask_bytes = Vec::with_capacity(test_a.len());
    for (index, sample) in test_a.iter().enumerate() {
        let predicted = predict_mask(&outcome.params, &sample.image, &settings, index).unwrap();
        let png = exp_dir.join(format!("seed{seed}_{}.png", sample.id));
        save_mask(&png, &predicted.mask).unwrap();
        mask_bytes.push((sample.id.clone(), std::fs::read(&png).unwrap()));
    }
    let report_json = serde_json::to_string_pretty(&report_a).unwrap();

    SeedRun {
        seed,
        accuracy,
        report_a,
        report_b,
        checkpoint_bytes,
        mask_bytes,
        report_json,
    }
}

fn experiment() -> &'static Experiment {
    static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();
    EXPERIMENT.get_or_init(|| {
        let started = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let train_manifest = generate_synth(&desk_synth(200, 9001), &dir.path().join("train")).unwrap();
        let test_manifest = generate_synth(&desk_synth(50, 9002), &dir.path().join("test_a")).unwrap();
        // Same geometry and draw order as the in-domain test set, rendered
        // under a brightness/hue shift: a second acquisition "domain".
        let shifted = SynthSpec {
            brightness: -0.2,
            hue_degrees: 35.0,
            ..desk_synth(50, 9002)
        };
        let shift_manifest = generate_synth(&shifted, &dir.path().join("test_b")).unwrap();

        let size = desk_config(0).image_size;
        let train = load_samples(&train_manifest, size).unwrap();
        let test_a = load_samples(&test_manifest, size).unwrap();
        let test_b = load_samples(&shift_manifest, size).unwrap();

        let runs: Vec<SeedRun> = DESK_SEEDS
            .iter()
            .map(|&seed| run_seed(dir.path(), &train, &test_a, &test_b, seed))
            .collect();
        Experiment {
            train,
            test_a,
            test_b,
            runs,
            build_seconds: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_6_desk_scale_end_to_end() {
    let exp = experiment();
    let mut passing = 0usize;
    for run in &exp.runs {
        let ok = run.accuracy >= ACCURACY_FLOOR && run.report_a.mean_iou >= IOU_FLOOR;
        println!(
            "  seed {}: test accuracy {:.3}, mean IoU {:.3} -> {}",
            run.seed,
            run.accuracy,
            run.report_a.mean_iou,
            if ok { "ok" } else { "MISS" }
        );
        passing += usize::from(ok);
    }
    assert!(
        passing >= 4,
        "only {passing}/5 seeds reached accuracy >= {ACCURACY_FLOOR} and IoU >= {IOU_FLOOR}"
    );
    pass(
        6,
        &format!(
            "{passing}/5 seeds at accuracy >= {ACCURACY_FLOOR} and IoU >= {IOU_FLOOR} \
             (200 train / 50 test, T=16, {DESK_EPOCHS} epochs, {:.0} s total)",
            exp.build_seconds
        ),
    );
}

#[test]
fn criterion_7_cross_domain_smoke() {
    let exp = experiment();
    let in_domain: Vec<EvalReport> = exp.runs.iter().map(|r| r.report_a.clone()).collect();
    let cross: Vec<EvalReport> = exp.runs.iter().map(|r| r.report_b.clone()).collect();
    let merged = vec![
        merge_reports(&in_domain).unwrap(),
        merge_reports(&cross).unwrap(),
    ];
    let table = summary_table(&merged);
    println!("{table}");
    assert!(table.contains("synthA_test") && table.contains("synthB_test"));

    let ordered = exp
        .runs
        .iter()
        .filter(|r| r.report_a.mean_iou >= r.report_b.mean_iou)
        .count();
    // Soft check by design: the ordering is expected, not guaranteed.
    if ordered >= 4 {
        pass(7, &format!("grid produced; in-domain >= cross-domain on {ordered}/5 seeds"));
    } else {
        println!("[WARN] criterion 7: in-domain >= cross-domain on only {ordered}/5 seeds");
    }
}

#[test]
fn criterion_8_reproducibility() {
    let exp = experiment();
    let first = &exp.runs[0];
    let dir = tempfile::tempdir().unwrap();
    let rerun = run_seed(dir.path(), &exp.train, &exp.test_a, &exp.test_b, first.seed);

    assert_eq!(
        first.checkpoint_bytes, rerun.checkpoint_bytes,
        "checkpoint bytes differ between identical runs"
    );
    assert_eq!(first.mask_bytes.len(), rerun.mask_bytes.len());
    for ((id_a, bytes_a), (id_b, bytes_b)) in first.mask_bytes.iter().zip(&rerun.mask_bytes) {
        assert_eq!(id_a, id_b);
        assert_eq!(bytes_a, bytes_b, "mask bytes differ for {id_a}");
    }
    assert_eq!(first.report_json, rerun.report_json, "report bytes differ");
    pass(
        8,
        &format!(
            "seed {} rerun: checkpoint, {} masks and report byte-identical",
            first.seed,
            rerun.mask_bytes.len()
        ),
    );
}

// --- criterion 9: fidelity comparison hook (not gating) -------------------

#[test]
fn criterion_9_reference_comparison_hook() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_samples: 12,
        image_size: 16,
        radius_min: 3.0,
        radius_max: 5.0,
        seed: 60,
        ..SynthSpec::default()
    };
    let manifest = generate_synth(&spec, &dir.path().join("data")).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        nca_channels: 4,
        nca_hidden: 8,
        steps: 4,
        classifier_hidden: 16,
        image_size: 16,
        folds: 4,
        seed: 61,
        ..TrainConfig::default()
    };
    let samples = load_samples(&manifest, cfg.image_size).unwrap();
    let outcome = train_fold(&samples, 0, &cfg).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.params, &cfg, None).unwrap();

    let output = Command::new(env!("CARGO_BIN_EXE_ncaseg"))
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            dir.path().join("data/manifest.csv").to_str().unwrap(),
            "--out",
            dir.path().join("ev").to_str().unwrap(),
            "--reference",
            "49.6,1.8",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        stdout.contains("reference 49.6 +/- 1.8") && stdout.contains("this run"),
        "comparison line missing from: {stdout}"
    );
    pass(9, "reference comparison printed side by side, nothing asserted against it");
}
