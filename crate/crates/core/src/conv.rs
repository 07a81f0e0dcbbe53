//! Depthwise 3x3 convolution with replicate padding, plus its adjoints.
//!
//! All routines operate on raw row-major buffers so the perception tensor
//! can interleave kernel responses per cell (`dst_stride`/`dst_offset`).
//! Interior cells take a clamp-free fast path; only the one-pixel border
//! pays for index clamping. The adjoint routines mirror the forward loops
//! tap-for-tap, so the gradients are exact for the replicate boundary.

/// `dst[(i*w+j)*dst_stride + dst_offset + c] = sum_t kernel[t*n+c] * src[clamped(t)]`
pub(crate) fn conv3x3_into(
    src: &[f64],
    h: usize,
    w: usize,
    n: usize,
    kernel: &[f64],
    dst: &mut [f64],
    dst_stride: usize,
    dst_offset: usize,
) {
    debug_assert_eq!(src.len(), h * w * n);
    debug_assert_eq!(kernel.len(), 9 * n);
    for i in 0..h {
        let interior_row = i >= 1 && i + 1 < h;
        for j in 0..w {
            let base = (i * w + j) * dst_stride + dst_offset;
            let out = &mut dst[base..base + n];
            out.fill(0.0);
            if interior_row && j >= 1 && j + 1 < w {
                for di in 0..3 {
                    let row = (i + di - 1) * w;
                    for dj in 0..3 {
                        let sb = (row + j + dj - 1) * n;
                        let kb = (di * 3 + dj) * n;
                        let s = &src[sb..sb + n];
                        let k = &kernel[kb..kb + n];
                        for c in 0..n {
                            out[c] += k[c] * s[c];
                        }
                    }
                }
            } else {
                for di in 0..3 {
                    let ii = clamp_index(i, di, h);
                    for dj in 0..3 {
                        let jj = clamp_index(j, dj, w);
                        let sb = (ii * w + jj) * n;
                        let kb = (di * 3 + dj) * n;
                        let s = &src[sb..sb + n];
                        let k = &kernel[kb..kb + n];
                        for c in 0..n {
                            out[c] += k[c] * s[c];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint w.r.t. the convolution input: scatter-add
/// `d_src[clamped(t)] += kernel[t*n+c] * d_out[(i*w+j)*stride + offset + c]`.
pub(crate) fn conv3x3_adjoint_into(
    d_out: &[f64],
    h: usize,
    w: usize,
    n: usize,
    kernel: &[f64],
    d_src: &mut [f64],
    out_stride: usize,
    out_offset: usize,
) {
    debug_assert_eq!(d_src.len(), h * w * n);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * out_stride + out_offset;
            let g = &d_out[base..base + n];
            for di in 0..3 {
                let ii = clamp_index(i, di, h);
                for dj in 0..3 {
                    let jj = clamp_index(j, dj, w);
                    let sb = (ii * w + jj) * n;
                    let kb = (di * 3 + dj) * n;
                    let k = &kernel[kb..kb + n];
                    let d = &mut d_src[sb..sb + n];
                    for c in 0..n {
                        d[c] += k[c] * g[c];
                    }
                }
            }
        }
    }
}

/// Adjoint w.r.t. the kernel: `d_kernel[t*n+c] += src[clamped(t)] * d_out[..]`.
pub(crate) fn conv3x3_kernel_grad_into(
    src: &[f64],
    h: usize,
    w: usize,
    n: usize,
    d_out: &[f64],
    d_kernel: &mut [f64],
    out_stride: usize,
    out_offset: usize,
) {
    debug_assert_eq!(d_kernel.len(), 9 * n);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * out_stride + out_offset;
            let g = &d_out[base..base + n];
            for di in 0..3 {
                let ii = clamp_index(i, di, h);
                for dj in 0..3 {
                    let jj = clamp_index(j, dj, w);
                    let sb = (ii * w + jj) * n;
                    let kb = (di * 3 + dj) * n;
                    let s = &src[sb..sb + n];
                    let dk = &mut d_kernel[kb..kb + n];
                    for c in 0..n {
                        dk[c] += s[c] * g[c];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn clamp_index(i: usize, di: usize, len: usize) -> usize {
    // replicate padding: neighbor index i + di - 1 clamped to [0, len)
    (i + di).saturating_sub(1).min(len - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop reference used as the oracle for all three routines.
    fn naive_conv(src: &[f64], h: usize, w: usize, n: usize, kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h * w * n];
        for i in 0..h as isize {
            for j in 0..w as isize {
                for c in 0..n {
                    let mut acc = 0.0;
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let ii = (i + di).clamp(0, h as isize - 1) as usize;
                            let jj = (j + dj).clamp(0, w as isize - 1) as usize;
                            let t = ((di + 1) * 3 + (dj + 1)) as usize;
                            acc += kernel[t * n + c] * src[(ii * w + jj) * n + c];
                        }
                    }
                    out[(i as usize * w + j as usize) * n + c] = acc;
                }
            }
        }
        out
    }

    fn random_buf(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, n) in &[(5, 5, 4), (3, 7, 2), (8, 3, 5)] {
            let src = random_buf(&mut rng, h * w * n);
            let kernel = random_buf(&mut rng, 9 * n);
            let mut dst = vec![0.0; h * w * n];
            conv3x3_into(&src, h, w, n, &kernel, &mut dst, n, 0);
            let expect = naive_conv(&src, h, w, n, &kernel);
            for (a, b) in dst.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn strided_destination_matches_packed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w, n) = (6, 4, 3);
        let src = random_buf(&mut rng, h * w * n);
        let kernel = random_buf(&mut rng, 9 * n);
        let mut packed = vec![0.0; h * w * n];
        conv3x3_into(&src, h, w, n, &kernel, &mut packed, n, 0);
        let mut strided = vec![0.0; h * w * 3 * n];
        conv3x3_into(&src, h, w, n, &kernel, &mut strided, 3 * n, n);
        for cell in 0..h * w {
            for c in 0..n {
                assert_eq!(packed[cell * n + c], strided[cell * 3 * n + n + c]);
            }
        }
    }

    /// The adjoint must satisfy <conv(x), y> == <x, adjoint(y)> exactly in
    /// exact arithmetic; check to fp tolerance against random vectors.
    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (h, w, n) = (7, 5, 3);
        let x = random_buf(&mut rng, h * w * n);
        let y = random_buf(&mut rng, h * w * n);
        let kernel = random_buf(&mut rng, 9 * n);

        let mut cx = vec![0.0; h * w * n];
        conv3x3_into(&x, h, w, n, &kernel, &mut cx, n, 0);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut aty = vec![0.0; h * w * n];
        conv3x3_adjoint_into(&y, h, w, n, &kernel, &mut aty, n, 0);
        let rhs: f64 = aty.iter().zip(&x).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    /// d/dk <conv_k(x), y> must equal the kernel-grad routine.
    #[test]
    fn kernel_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (h, w, n) = (5, 6, 2);
        let x = random_buf(&mut rng, h * w * n);
        let y = random_buf(&mut rng, h * w * n);
        let kernel = random_buf(&mut rng, 9 * n);

        let mut dk = vec![0.0; 9 * n];
        conv3x3_kernel_grad_into(&x, h, w, n, &y, &mut dk, n, 0);

        let f = |k: &[f64]| -> f64 {
            let mut out = vec![0.0; h * w * n];
            conv3x3_into(&x, h, w, n, k, &mut out, n, 0);
            out.iter().zip(&y).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in [0, 3, 8, 9 * n - 1] {
            let mut kp = kernel.clone();
            kp[idx] += eps;
            let mut km = kernel.clone();
            km[idx] -= eps;
            let fd = (f(&kp) - f(&km)) / (2.0 * eps);
            assert!(
                (dk[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "kernel grad {idx}: {} vs fd {fd}",
                dk[idx]
            );
        }
    }
}
