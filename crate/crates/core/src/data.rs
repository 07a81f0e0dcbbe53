//! Dataset manifests, PNG image and mask IO, and a synthetic generator.
//!
//! A manifest is a CSV file with two optional directive lines followed by a
//! header and one row per sample:
//!
//! ```text
//! # dataset: domain_a
//! # classes: basophilic,eosinophilic
//! id,image,label,mask
//! domain_a_0000,images/domain_a_0000.png,0,masks/domain_a_0000.png
//! ```
//!
//! `label` and `mask` may be empty (classification-only or mask-only rows).
//! Paths are relative to the manifest's directory.

use crate::config::{parse, KeyedConfig};
use crate::error::{Error, Result};
use crate::eval::Sample;
use crate::segment::BinaryMask;
use crate::trainer::mix_seed;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const TAG_SYNTH: u64 = 0x5e17;

/// One manifest row. Paths are stored as written in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: Option<usize>,
    pub mask: Option<String>,
}

/// A validated dataset listing.
#[derive(Debug, Clone)]
pub struct SampleManifest {
    pub dataset: String,
    /// Class names; a label k refers to classes[k].
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths resolve against.
    pub root: PathBuf,
}

impl SampleManifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn mask_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.mask.as_ref().map(|m| self.root.join(m))
    }
}

fn manifest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Parse and validate a manifest. Referenced files must exist; duplicate ids
/// and dangling references are reported with their line numbers.
pub fn load_manifest(path: &Path) -> Result<SampleManifest> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let mut dataset = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut classes = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# dataset:") {
            dataset = rest.trim().to_string();
        } else if let Some(rest) = line.strip_prefix("# classes:") {
            classes = rest.trim().split(',').map(|c| c.trim().to_string()).collect();
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(path, e.to_string()))?
        .clone();
    let expected = ["id", "image", "label", "mask"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(manifest_err(
            path,
            format!("header must be `id,image,label,mask`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| manifest_err(path, e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(0).unwrap_or("").trim().to_string();
        let image = record.get(1).unwrap_or("").trim().to_string();
        let label_raw = record.get(2).unwrap_or("").trim();
        let mask_raw = record.get(3).unwrap_or("").trim();

        if id.is_empty() {
            return Err(manifest_err(path, format!("line {line}: empty sample id")));
        }
        if !seen.insert(id.clone()) {
            return Err(manifest_err(path, format!("line {line}: duplicate id `{id}`")));
        }
        if image.is_empty() {
            return Err(manifest_err(path, format!("line {line}: `{id}` has no image path")));
        }

        let label = if label_raw.is_empty() {
            None
        } else {
            let value: usize = label_raw.parse().map_err(|_| {
                manifest_err(path, format!("line {line}: label `{label_raw}` is not a class index"))
            })?;
            if !classes.is_empty() && value >= classes.len() {
                return Err(manifest_err(
                    path,
                    format!("line {line}: label {value} out of range for {} classes", classes.len()),
                ));
            }
            Some(value)
        };
        let mask = if mask_raw.is_empty() { None } else { Some(mask_raw.to_string()) };

        if !root.join(&image).is_file() {
            return Err(manifest_err(path, format!("line {line}: image `{image}` does not exist")));
        }
        if let Some(m) = &mask {
            if !root.join(m).is_file() {
                return Err(manifest_err(path, format!("line {line}: mask `{m}` does not exist")));
            }
        }
        entries.push(ManifestEntry { id, image, label, mask });
    }

    Ok(SampleManifest { dataset, classes, entries, root })
}

/// Write a manifest in the format [`load_manifest`] reads.
pub fn save_manifest(manifest: &SampleManifest, path: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# dataset: {}", manifest.dataset);
    if !manifest.classes.is_empty() {
        let _ = writeln!(text, "# classes: {}", manifest.classes.join(","));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["id", "image", "label", "mask"])
        .and_then(|_| {
            for e in &manifest.entries {
                let label = e.label.map(|l| l.to_string()).unwrap_or_default();
                writer.write_record([
                    e.id.as_str(),
                    e.image.as_str(),
                    label.as_str(),
                    e.mask.as_deref().unwrap_or(""),
                ])?;
            }
            Ok(())
        })
        .map_err(|e| manifest_err(path, e.to_string()))?;
    let rows = writer
        .into_inner()
        .map_err(|e| manifest_err(path, e.to_string()))?;
    text.push_str(&String::from_utf8(rows).expect("csv writer emits UTF-8"));
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load every manifest entry into memory at the given working resolution.
pub fn load_samples(manifest: &SampleManifest, image_size: usize) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = load_image(&manifest.image_path(e), image_size)?;
            let mask = match manifest.mask_path(e) {
                Some(p) => Some(load_mask(&p, image_size)?),
                None => None,
            };
            Ok(Sample { id: e.id.clone(), image, label: e.label, mask })
        })
        .collect()
}

/// Decode a PNG to an H x W x 3 tensor in [0,1] (byte / 255), bilinearly
/// resized to `target_size` square. Grayscale replicates to 3 channels;
/// an alpha channel is dropped.
pub fn load_image(path: &Path, target_size: usize) -> Result<Array3<f64>> {
    if target_size < 1 {
        return Err(Error::InvalidDimensions("target size must be >= 1".into()));
    }
    let display = path.display().to_string();
    let img = image::open(path).map_err(|e| Error::Image { path: display.clone(), source: e })?;
    use image::DynamicImage::*;
    let (h, w, rgb): (usize, usize, Vec<[u8; 3]>) = match &img {
        ImageRgb8(b) => (
            b.height() as usize,
            b.width() as usize,
            b.pixels().map(|p| p.0).collect(),
        ),
        ImageRgba8(b) => (
            b.height() as usize,
            b.width() as usize,
            b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]).collect(),
        ),
        ImageLuma8(b) => (
            b.height() as usize,
            b.width() as usize,
            b.pixels().map(|p| [p.0[0]; 3]).collect(),
        ),
        ImageLumaA8(b) => (
            b.height() as usize,
            b.width() as usize,
            b.pixels().map(|p| [p.0[0]; 3]).collect(),
        ),
        other => {
            return Err(Error::UnsupportedImage {
                path: display,
                message: format!("pixel format {:?} (use 8-bit gray or RGB)", other.color()),
            })
        }
    };
    let mut tensor = Array3::zeros((h, w, 3));
    for (idx, px) in rgb.iter().enumerate() {
        let (i, j) = (idx / w, idx % w);
        for c in 0..3 {
            tensor[[i, j, c]] = px[c] as f64 / 255.0;
        }
    }
    if (h, w) == (target_size, target_size) {
        return Ok(tensor);
    }
    Ok(bilinear_resize(&tensor, target_size, target_size))
}

/// Axis resampling positions: (low index, high index, fraction toward high).
fn bilinear_axis(src_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn bilinear_resize(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    let rows = bilinear_axis(h, out_h);
    let cols = bilinear_axis(w, out_w);
    Array3::from_shape_fn((out_h, out_w, ch), |(i, j, c)| {
        let (i0, i1, fi) = rows[i];
        let (j0, j1, fj) = cols[j];
        (1.0 - fi) * (1.0 - fj) * src[[i0, j0, c]]
            + (1.0 - fi) * fj * src[[i0, j1, c]]
            + fi * (1.0 - fj) * src[[i1, j0, c]]
            + fi * fj * src[[i1, j1, c]]
    })
}

/// Decode a grayscale PNG mask: foreground where the byte exceeds 127,
/// nearest-neighbor resized to `target_size` square.
pub fn load_mask(path: &Path, target_size: usize) -> Result<BinaryMask> {
    if target_size < 1 {
        return Err(Error::InvalidDimensions("target size must be >= 1".into()));
    }
    let display = path.display().to_string();
    let img = image::open(path)
        .map_err(|e| Error::Image { path: display, source: e })?
        .to_luma8();
    let (h, w) = (img.height() as usize, img.width() as usize);
    let at = |i: usize, j: usize| img.get_pixel(j as u32, i as u32).0[0] > 127;
    if (h, w) == (target_size, target_size) {
        return Ok(BinaryMask::from_shape_fn((h, w), |(i, j)| at(i, j)));
    }
    let nearest = |src_len: usize, out_len: usize| -> Vec<usize> {
        let scale = src_len as f64 / out_len as f64;
        (0..out_len)
            .map(|i| (((i as f64 + 0.5) * scale) as usize).min(src_len - 1))
            .collect()
    };
    let rows = nearest(h, target_size);
    let cols = nearest(w, target_size);
    Ok(BinaryMask::from_shape_fn((target_size, target_size), |(i, j)| at(rows[i], cols[j])))
}

/// Encode an H x W x 3 tensor in [0,1] as an RGB PNG (values rounded to bytes).
pub fn save_image(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::InvalidDimensions(format!("expected 3 channels, got {ch}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [0, 1, 2].map(|c| (image[[i, j, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), source: e })
}

/// Encode a binary mask as a grayscale PNG (foreground 255, background 0).
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(j as u32, i as u32, image::Luma([if mask[[i, j]] { 255 } else { 0 }]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), source: e })
}

/// Write the image with the mask boundary traced in red, for eyeballing.
pub fn save_overlay(path: &Path, image: &Array3<f64>, mask: &BinaryMask) -> Result<()> {
    let (h, w, _) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            context: "overlay mask",
            expected: format!("{h}x{w}"),
            actual: format!("{}x{}", mask.dim().0, mask.dim().1),
        });
    }
    let mut overlaid = image.clone();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            let on_edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                !(0..h as i64).contains(&ni)
                    || !(0..w as i64).contains(&nj)
                    || !mask[[ni as usize, nj as usize]]
            });
            if on_edge {
                overlaid[[i, j, 0]] = 1.0;
                overlaid[[i, j, 1]] = 0.1;
                overlaid[[i, j, 2]] = 0.1;
            }
        }
    }
    save_image(path, &overlaid)
}

/// Parameters of the synthetic two-class dataset. Both classes are a stained
/// disk on a noisy pale background; they differ by stain color (cool purple
/// vs warm red-brown), the way real cell types differ by how they take up
/// dye. A low-amplitude sinusoidal texture with a per-sample random frequency
/// rides on the disk as a class-independent nuisance. The ground-truth mask
/// is the disk. `brightness` and `hue_degrees` shift the whole image to fake
/// a second acquisition domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Lower end of the nuisance-texture frequency range, in cycles across
    /// the image; each sample draws uniformly from [freq_low, freq_high].
    pub freq_low: f64,
    /// Upper end of the nuisance-texture frequency range.
    pub freq_high: f64,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    pub brightness: f64,
    pub hue_degrees: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_samples: 200,
            image_size: 64,
            num_classes: 2,
            // The cell fills a large part of the patch, like a centered crop
            // around a detected cell. Foreground and background then have
            // comparable pixel mass, which is where a histogram threshold on
            // the projected response is most reliable.
            radius_min: 22.0,
            radius_max: 28.0,
            freq_low: 2.0,
            freq_high: 8.0,
            noise: 0.01,
            brightness: 0.0,
            hue_degrees: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Error::InvalidConfig {
            field: field.to_string(),
            message: message.to_string(),
        };
        if self.num_samples < 1 {
            return Err(bad("synth_num_samples", "must be >= 1"));
        }
        if self.image_size < 8 {
            return Err(bad("synth_image_size", "must be >= 8"));
        }
        if self.num_classes != 2 {
            return Err(bad("synth_num_classes", "generator draws exactly 2 classes"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(bad("synth_radius_min", "need 0 < radius_min <= radius_max"));
        }
        if self.radius_max >= self.image_size as f64 / 2.0 {
            return Err(bad("synth_radius_max", "must be < image_size / 2"));
        }
        if !(self.freq_low > 0.0 && self.freq_high >= self.freq_low) {
            return Err(bad("synth_freq_low", "need 0 < freq_low <= freq_high"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(bad("synth_noise", "must be finite and >= 0"));
        }
        if !(self.brightness.is_finite() && self.hue_degrees.is_finite()) {
            return Err(bad("synth_brightness", "shift parameters must be finite"));
        }
        Ok(())
    }

    /// Render as `key = value` lines (same keys `try_set` accepts).
    pub fn to_key_value_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "synth_num_samples = {}", self.num_samples);
        let _ = writeln!(s, "synth_image_size = {}", self.image_size);
        let _ = writeln!(s, "synth_num_classes = {}", self.num_classes);
        let _ = writeln!(s, "synth_radius_min = {}", self.radius_min);
        let _ = writeln!(s, "synth_radius_max = {}", self.radius_max);
        let _ = writeln!(s, "synth_freq_low = {}", self.freq_low);
        let _ = writeln!(s, "synth_freq_high = {}", self.freq_high);
        let _ = writeln!(s, "synth_noise = {}", self.noise);
        let _ = writeln!(s, "synth_brightness = {}", self.brightness);
        let _ = writeln!(s, "synth_hue_degrees = {}", self.hue_degrees);
        let _ = writeln!(s, "synth_seed = {}", self.seed);
        s
    }
}

impl KeyedConfig for SynthSpec {
    fn try_set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "synth_num_samples" => self.num_samples = parse(key, raw)?,
            "synth_image_size" => self.image_size = parse(key, raw)?,
            "synth_num_classes" => self.num_classes = parse(key, raw)?,
            "synth_radius_min" => self.radius_min = parse(key, raw)?,
            "synth_radius_max" => self.radius_max = parse(key, raw)?,
            "synth_freq_low" => self.freq_low = parse(key, raw)?,
            "synth_freq_high" => self.freq_high = parse(key, raw)?,
            "synth_noise" => self.noise = parse(key, raw)?,
            "synth_brightness" => self.brightness = parse(key, raw)?,
            "synth_hue_degrees" => self.hue_degrees = parse(key, raw)?,
            "synth_seed" => self.seed = parse(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Luminance-preserving hue-rotation matrix (the SVG feColorMatrix form).
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    [
        [0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s],
        [0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s],
        [0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s],
    ]
}

/// Disk membership for pixel (i, j): distance from the grid center, measured
/// between pixel centers, is at most `radius`. Exposed so tests can count
/// rasterized pixels independently.
pub fn synth_disk_contains(image_size: usize, radius: f64, i: usize, j: usize) -> bool {
    let c = (image_size as f64 - 1.0) / 2.0;
    let (di, dj) = (i as f64 - c, j as f64 - c);
    di * di + dj * dj <= radius * radius
}

fn render_sample(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> (Array3<f64>, BinaryMask) {
    let size = spec.image_size;
    let radius = if spec.radius_min == spec.radius_max {
        spec.radius_min
    } else {
        rng.gen_range(spec.radius_min..spec.radius_max)
    };
    let freq = if spec.freq_low == spec.freq_high {
        spec.freq_low
    } else {
        rng.gen_range(spec.freq_low..spec.freq_high)
    };
    let phase_i = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_j = rng.gen_range(0.0..std::f64::consts::TAU);

    // Stain colors on a pale smear background. The class lives in the disk
    // color alone; the sinusoidal texture is a nuisance kept at low amplitude
    // so the disk stays the dominant component of the image. Both stains sit
    // at the same distance from the background so neither class is easier to
    // separate than the other.
    let disk_base = if class == 0 { [0.38, 0.24, 0.58] } else { [0.62, 0.32, 0.24] };
    let texture_amp = [0.08, 0.06, 0.09];
    let bg_base = [0.82, 0.80, 0.76];

    let mask = BinaryMask::from_shape_fn((size, size), |(i, j)| {
        synth_disk_contains(size, radius, i, j)
    });
    let mut image = Array3::zeros((size, size, 3));
    let omega = std::f64::consts::TAU * freq / size as f64;
    for i in 0..size {
        for j in 0..size {
            if mask[[i, j]] {
                let t = (omega * i as f64 + phase_i).sin() * (omega * j as f64 + phase_j).sin();
                for c in 0..3 {
                    image[[i, j, c]] = (disk_base[c] + texture_amp[c] * t).clamp(0.0, 1.0);
                }
            } else {
                for c in 0..3 {
                    let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 };
                    image[[i, j, c]] = (bg_base[c] + n).clamp(0.0, 1.0);
                }
            }
        }
    }

    if spec.hue_degrees != 0.0 || spec.brightness != 0.0 {
        let m = hue_matrix(spec.hue_degrees);
        for i in 0..size {
            for j in 0..size {
                let px = [image[[i, j, 0]], image[[i, j, 1]], image[[i, j, 2]]];
                for c in 0..3 {
                    let rotated = m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2];
                    image[[i, j, c]] = (rotated + spec.brightness).clamp(0.0, 1.0);
                }
            }
        }
    }
    (image, mask)
}

/// Generate the dataset under `out_dir` (images/, masks/, manifest.csv) and
/// return its manifest. Classes alternate by index, so any even sample count
/// is balanced. Deterministic: the same spec writes byte-identical files.
pub fn generate_synth(spec: &SynthSpec, out_dir: &Path) -> Result<SampleManifest> {
    spec.validate()?;
    let io = |p: &Path| p.display().to_string();
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(io(out_dir), e))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(|e| Error::io(io(out_dir), e))?;
    let dataset = out_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synth".to_string());

    let mut entries = Vec::with_capacity(spec.num_samples);
    for idx in 0..spec.num_samples {
        let class = idx % 2;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[TAG_SYNTH, idx as u64]));
        let (image, mask) = render_sample(spec, class, &mut rng);
        let id = format!("{dataset}_{idx:04}");
        let image_rel = format!("images/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        save_image(&out_dir.join(&image_rel), &image)?;
        save_mask(&out_dir.join(&mask_rel), &mask)?;
        entries.push(ManifestEntry {
            id,
            image: image_rel,
            label: Some(class),
            mask: Some(mask_rel),
        });
    }

    let manifest = SampleManifest {
        dataset,
        classes: vec!["basophilic".to_string(), "eosinophilic".to_string()],
        entries,
        root: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
