//! Reference implementations kept deliberately independent of the main
//! crate's algorithms. Everything here is written in the most direct style
//! possible (textbook formulas, nested loops, no shared helpers) so test
//! failures point at the production code, not at a common bug.

use ncaseg_core::{GridState, NcaParams};
use ndarray::{Array1, Array2, Array3};

/// Dense symmetric eigendecomposition by the cyclic Jacobi method.
/// Returns eigenvalues in descending order with matching eigenvector
/// columns. Only meant for the small matrices used in tests.
pub fn jacobi_eigen(sym: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = sym.nrows();
    assert_eq!(n, sym.ncols(), "matrix must be square");
    let mut a = sym.clone();
    let mut v = Array2::eye(n);

    let off = |a: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += a[[p, q]] * a[[p, q]];
                }
            }
        }
        s.sqrt()
    };
    let scale: f64 = sym.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..100 {
        if off(&a) <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() <= 1e-300 {
                    continue;
                }
                // classic Jacobi rotation annihilating a[p][q]
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[[row, i]];
        }
    }
    (values, vectors)
}

/// Two-pass textbook covariance of the per-cell state vectors, population
/// normalization (divide by the cell count).
pub fn naive_covariance(values: &Array3<f64>) -> (Array2<f64>, Array1<f64>) {
    let (h, w, n) = values.dim();
    let cells = (h * w) as f64;
    let mut mean = Array1::zeros(n);
    for i in 0..h {
        for j in 0..w {
            for c in 0..n {
                mean[c] += values[[i, j, c]];
            }
        }
    }
    for c in 0..n {
        mean[c] /= cells;
    }
    let mut sigma = Array2::zeros((n, n));
    for i in 0..h {
        for j in 0..w {
            for a in 0..n {
                for b in 0..n {
                    sigma[[a, b]] +=
                        (values[[i, j, a]] - mean[a]) * (values[[i, j, b]] - mean[b]);
                }
            }
        }
    }
    for a in 0..n {
        for b in 0..n {
            sigma[[a, b]] /= cells;
        }
    }
    (sigma, mean)
}

/// Exhaustive Otsu scan: evaluates the weighted intra-class variance
/// directly from the raw values at every interior bin edge and returns the
/// minimizing edge (lowest on ties).
pub fn exhaustive_otsu(values: &[f64], bins: usize) -> Option<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return None;
    }
    let width = (max - min) / bins as f64;
    let mut best: Option<(f64, f64)> = None; // (objective, tau)
    for k in 1..bins {
        let tau = min + k as f64 * width;
        let below: Vec<f64> = values.iter().cloned().filter(|v| *v < tau).collect();
        let above: Vec<f64> = values.iter().cloned().filter(|v| *v >= tau).collect();
        if below.is_empty() || above.is_empty() {
            continue;
        }
        let var = |xs: &[f64]| -> f64 {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let n = values.len() as f64;
        let objective = below.len() as f64 / n * var(&below) + above.len() as f64 / n * var(&above);
        match best {
            Some((obj, _)) if objective >= obj => {}
            _ => best = Some((objective, tau)),
        }
    }
    best.map(|(_, tau)| tau)
}

/// Completely independent forward pass: per-cell nested loops, no GEMM, no
/// shared convolution code. Takes explicit fire masks so it can replay a
/// recorded rollout. Returns every state plus the final logits.
pub fn naive_forward(
    image: &Array3<f64>,
    params: &NcaParams,
    fire_masks: &[Array2<f64>],
) -> (Vec<Array3<f64>>, Array1<f64>) {
    let (h, w, _) = image.dim();
    let n = params.dims.channels;
    let hid = params.dims.hidden;
    let identity = params.dims.perception_identity;
    let p_len = params.dims.perception_channels();

    let mut state = Array3::zeros((h, w, n));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                state[[i, j, c]] = image[[i, j, c]];
            }
        }
    }
    let mut states = vec![state.clone()];

    let clamp = |x: isize, hi: usize| -> usize { x.clamp(0, hi as isize - 1) as usize };

    for mask in fire_masks {
        let prev = states.last().unwrap().clone();
        let mut next = prev.clone();
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j]] != 1.0 {
                    continue;
                }
                // perception vector for this cell
                let mut percep = vec![0.0; p_len];
                let base = if identity {
                    for c in 0..n {
                        percep[c] = prev[[i, j, c]];
                    }
                    n
                } else {
                    0
                };
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let ii = clamp(i as isize + di, h);
                        let jj = clamp(j as isize + dj, w);
                        let ki = (di + 1) as usize;
                        let kj = (dj + 1) as usize;
                        for c in 0..n {
                            percep[base + c] += params.kernel1[[ki, kj, c]] * prev[[ii, jj, c]];
                            percep[base + n + c] +=
                                params.kernel2[[ki, kj, c]] * prev[[ii, jj, c]];
                        }
                    }
                }
                // two-layer update net
                let mut update = vec![0.0; n];
                for o in 0..n {
                    let mut acc = params.update_b2[o];
                    for m in 0..hid {
                        let mut z = params.update_b1[m];
                        for (c, pv) in percep.iter().enumerate() {
                            z += params.update_w1[[m, c]] * pv;
                        }
                        if z > 0.0 {
                            acc += params.update_w2[[o, m]] * z;
                        }
                    }
                    update[o] = acc;
                }
                for c in 0..n {
                    next[[i, j, c]] = prev[[i, j, c]] + update[c];
                }
            }
        }
        states.push(next);
    }

    // average pool and classify
    let last = states.last().unwrap();
    let mut pooled = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            for c in 0..n {
                pooled[c] += last[[i, j, c]];
            }
        }
    }
    for v in pooled.iter_mut() {
        *v /= (h * w) as f64;
    }
    let hc = params.dims.classifier_hidden;
    let k = params.dims.num_classes;
    let mut logits = Array1::zeros(k);
    for o in 0..k {
        let mut acc = params.classifier_b2[o];
        for m in 0..hc {
            let mut z = params.classifier_b1[m];
            for c in 0..n {
                z += params.classifier_w1[[m, c]] * pooled[c];
            }
            if z > 0.0 {
                acc += params.classifier_w2[[o, m]] * z;
            }
        }
        logits[o] = acc;
    }
    (states, logits)
}

/// Mean and sample standard deviation by the direct formula.
pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Per-pixel IoU by direct counting.
pub fn naive_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (x, y) in a.iter().zip(b.iter()) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Helper used by several suites: pack a raw array into a GridState.
pub fn grid_from_values(values: Array3<f64>) -> GridState {
    GridState::new(values).expect("valid test state")
}
