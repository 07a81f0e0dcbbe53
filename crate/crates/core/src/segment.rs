//! Mask extraction from a final rollout state: covariance of the per-cell
//! feature vectors, leading principal component by power iteration, sign
//! canonicalization, centered projection, Otsu threshold, binary mask.

use crate::error::{Error, Result};
use crate::grid::GridState;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// H x W boolean segmentation mask, true = foreground.
pub type BinaryMask = Array2<bool>;

/// Per-pixel projection of the state onto the leading principal component.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    pub values: Array2<f64>,
}

/// Result of `extract_mask`. A degenerate state (no variance anywhere)
/// yields an all-false mask with the flag set instead of an error.
#[derive(Debug, Clone)]
pub struct ExtractedMask {
    pub mask: BinaryMask,
    pub response: ResponseMap,
    pub threshold: Option<f64>,
    pub degenerate: bool,
}

/// Start seed for power iteration; fixed so extraction is a pure function
/// of the state.
const POWER_ITERATION_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
const POWER_ITERATION_CAP: usize = 10_000;
const ALIGNMENT_TOL: f64 = 1e-12;

/// Population covariance and mean of the per-cell state vectors:
/// `sigma = (1/HW) * sum (s - mean)(s - mean)^T`.
pub fn covariance(state: &GridState) -> (Array2<f64>, Array1<f64>) {
    let (h, w, n) = state.values.dim();
    let cells = h * w;
    let src = state.values.as_slice().expect("contiguous");
    let mut mean = Array1::<f64>::zeros(n);
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    {
        let m = mean.as_slice_mut().expect("contiguous");
        for cell in 0..cells {
            let s = &src[cell * n..(cell + 1) * n];
            for c in 0..n {
                m[c] += s[c];
                lo[c] = lo[c].min(s[c]);
                hi[c] = hi[c].max(s[c]);
            }
        }
        for (c, v) in m.iter_mut().enumerate() {
            *v /= cells as f64;
            // a channel with a single value centers to exactly zero, so a
            // constant state yields the exact zero matrix
            if lo[c] == hi[c] {
                *v = lo[c];
            }
        }
    }
    let mut centered = Array2::<f64>::zeros((cells, n));
    {
        let dst = centered.as_slice_mut().expect("contiguous");
        let m = mean.as_slice().expect("contiguous");
        for cell in 0..cells {
            for c in 0..n {
                dst[cell * n + c] = src[cell * n + c] - m[c];
            }
        }
    }
    let mut sigma = Array2::<f64>::zeros((n, n));
    general_mat_mul(
        1.0 / cells as f64,
        &centered.t(),
        &centered,
        0.0,
        &mut sigma,
    );
    // enforce exact symmetry against GEMM rounding
    for a in 0..n {
        for b in a + 1..n {
            let s = 0.5 * (sigma[[a, b]] + sigma[[b, a]]);
            sigma[[a, b]] = s;
            sigma[[b, a]] = s;
        }
    }
    (sigma, mean)
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration with a
/// fixed internal start seed. Converges when successive iterates align to
/// within 1e-12; errors on the zero matrix or after 10000 iterations.
pub fn leading_pc(sigma: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let n = sigma.nrows();
    if n != sigma.ncols() {
        return Err(Error::ShapeMismatch {
            context: "covariance matrix",
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", sigma.nrows(), sigma.ncols()),
        });
    }
    if sigma.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateInput(
            "zero covariance matrix has no principal direction".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let draw_unit = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        loop {
            let v: Array1<f64> = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let norm = v.dot(&v).sqrt();
            if norm > 1e-3 {
                return v / norm;
            }
        }
    };
    let mut v = draw_unit(&mut rng);
    for _iter in 0..POWER_ITERATION_CAP {
        let mut w = sigma.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            // landed exactly in the null space; restart from a fresh vector
            v = draw_unit(&mut rng);
            continue;
        }
        w /= norm;
        let align = w.dot(&v).abs();
        v = w;
        if 1.0 - align < ALIGNMENT_TOL {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITERATION_CAP,
    })
}

/// Centered projection `P[i,j] = v1 . (S[i,j] - mean)`.
pub fn project(state: &GridState, v1: &Array1<f64>, mean: &Array1<f64>) -> ResponseMap {
    let (h, w, n) = state.values.dim();
    let src = state.values.as_slice().expect("contiguous");
    let vs = v1.as_slice().expect("contiguous");
    let ms = mean.as_slice().expect("contiguous");
    let mut out = Array2::zeros((h, w));
    {
        let o = out.as_slice_mut().expect("contiguous");
        for (cell, ov) in o.iter_mut().enumerate() {
            let s = &src[cell * n..(cell + 1) * n];
            let mut acc = 0.0;
            for c in 0..n {
                acc += vs[c] * (s[c] - ms[c]);
            }
            *ov = acc;
        }
    }
    ResponseMap { values: out }
}

/// Mean over the 1-pixel border frame and over the whole map.
fn border_and_global_mean(map: &Array2<f64>) -> (f64, f64) {
    let (h, w) = map.dim();
    let mut border_sum = 0.0;
    let mut border_count = 0usize;
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = map[[i, j]];
            total += v;
            if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
                border_sum += v;
                border_count += 1;
            }
        }
    }
    (border_sum / border_count as f64, total / (h * w) as f64)
}

/// Canonicalize the eigenvector sign: the border frame (assumed background)
/// must not project above the global mean. Idempotent.
pub fn orient(v1: Array1<f64>, state: &GridState, mean: &Array1<f64>) -> Array1<f64> {
    let map = project(state, &v1, mean);
    let (border, global) = border_and_global_mean(&map.values);
    if border > global {
        -v1
    } else {
        v1
    }
}

/// Otsu's threshold over a histogram of `bins` equal-width bins spanning
/// [min, max]: returns the interior bin edge minimizing the weighted
/// intra-class variance, lowest edge on ties.
pub fn otsu_threshold(map: &ResponseMap, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidConfig {
            field: "otsu_bins".to_string(),
            message: format!("need at least 2 bins, got {bins}"),
        });
    }
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "response map",
            step: 0,
        });
    }
    let values = map.values.as_slice().expect("contiguous");
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::DegenerateInput(
            "constant response map has no threshold".to_string(),
        ));
    }
    let width = (max - min) / bins as f64;

    let mut count = vec![0u64; bins];
    let mut sum = vec![0.0f64; bins];
    let mut sumsq = vec![0.0f64; bins];
    for &v in values {
        let b = (((v - min) / width) as usize).min(bins - 1);
        count[b] += 1;
        sum[b] += v;
        sumsq[b] += v * v;
    }
    let total_count = values.len() as f64;

    // prefix scan over bins; per-class stats are exact sums of the member
    // values, not bin-center approximations
    let mut best_k = 0usize;
    let mut best_obj = f64::INFINITY;
    let mut c0 = 0u64;
    let mut s0 = 0.0;
    let mut q0 = 0.0;
    let total_c: u64 = count.iter().sum();
    let total_s: f64 = sum.iter().sum();
    let total_q: f64 = sumsq.iter().sum();
    for k in 1..bins {
        c0 += count[k - 1];
        s0 += sum[k - 1];
        q0 += sumsq[k - 1];
        let c1 = total_c - c0;
        if c0 == 0 || c1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let q1 = total_q - q0;
        // weighted intra-class variance: sum over classes of
        // (sumsq - count * mean^2) / N
        let m0 = s0 / c0 as f64;
        let m1 = s1 / c1 as f64;
        let objective = ((q0 - c0 as f64 * m0 * m0) + (q1 - c1 as f64 * m1 * m1)) / total_count;
        if objective < best_obj {
            best_obj = objective;
            best_k = k;
        }
    }
    if best_k == 0 {
        // every interior edge left one class empty: all mass in one bin,
        // which only happens when max/min collapse within fp resolution
        return Err(Error::DegenerateInput(
            "response map mass collapses into a single bin".to_string(),
        ));
    }
    Ok(min + best_k as f64 * width)
}

/// Full extraction pipeline: covariance -> leading_pc -> orient -> project
/// -> otsu -> threshold comparison. Constant states come back as an
/// all-false mask flagged degenerate.
pub fn extract_mask(state: &GridState, bins: usize) -> Result<ExtractedMask> {
    let (h, w, _) = state.values.dim();
    let degenerate = |threshold: Option<f64>| ExtractedMask {
        mask: Array2::from_elem((h, w), false),
        response: ResponseMap {
            values: Array2::zeros((h, w)),
        },
        threshold,
        degenerate: true,
    };

    let (sigma, mean) = covariance(state);
    if sigma.iter().all(|v| *v == 0.0) {
        return Ok(degenerate(None));
    }
    let v1 = leading_pc(&sigma.view())?;
    let v1 = orient(v1, state, &mean);
    let response = project(state, &v1, &mean);
    let tau = match otsu_threshold(&response, bins) {
        Ok(t) => t,
        Err(Error::DegenerateInput(_)) => return Ok(degenerate(None)),
        Err(e) => return Err(e),
    };
    let mask = response.values.mapv(|v| v > tau);
    Ok(ExtractedMask {
        mask,
        response,
        threshold: Some(tau),
        degenerate: false,
    })
}

/// Largest 4-connected foreground component; ties broken by first
/// appearance in row-major order. Used only behind an opt-in flag.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dim();
    let mut label = vec![usize::MAX; h * w];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[[start / w, start % w]] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(cell) = stack.pop() {
            size += 1;
            let (i, j) = (cell / w, cell % w);
            let mut visit = |ni: usize, nj: usize| {
                let ncell = ni * w + nj;
                if mask[[ni, nj]] && label[ncell] == usize::MAX {
                    label[ncell] = id;
                    stack.push(ncell);
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < h {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < w {
                visit(i, j + 1);
            }
        }
        sizes.push(size);
    }
    let Some((best, _)) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
    else {
        return Array2::from_elem((h, w), false);
    };
    Array2::from_shape_fn((h, w), |(i, j)| label[i * w + j] == best)
}
