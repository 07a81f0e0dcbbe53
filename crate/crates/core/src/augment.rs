//! Dihedral (D4) augmentation: the eight lossless symmetries of the square
//! grid, applied identically to images and masks.

use ndarray::{Array2, Array3};
use rand::Rng;

/// Number of distinct D4 symmetries.
pub const D4_VARIANTS: u8 = 8;

/// Draw a group element uniformly.
pub fn random_variant<R: Rng>(rng: &mut R) -> u8 {
    rng.gen_range(0..D4_VARIANTS)
}

fn rot90_cw3(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((w, h, c), |(i, j, k)| img[[h - 1 - j, i, k]])
}

fn mirror_cols3(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(i, j, k)| img[[i, w - 1 - j, k]])
}

fn rot90_cw2(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((w, h), |(i, j)| mask[[h - 1 - j, i]])
}

fn mirror_cols2(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| mask[[i, w - 1 - j]])
}

/// Apply D4 symmetry `variant` (0..8) to an (H, W, C) image: the low two
/// bits count clockwise quarter turns, bit 2 mirrors columns first.
/// Values are moved, never interpolated.
pub fn d4_image(img: &Array3<f64>, variant: u8) -> Array3<f64> {
    assert!(variant < D4_VARIANTS, "variant {variant} out of range");
    let mut out = if variant & 4 != 0 {
        mirror_cols3(img)
    } else {
        img.clone()
    };
    for _ in 0..(variant & 3) {
        out = rot90_cw3(&out);
    }
    out
}

/// The same symmetry for a boolean mask, so image/mask pairs stay aligned.
pub fn d4_mask(mask: &Array2<bool>, variant: u8) -> Array2<bool> {
    assert!(variant < D4_VARIANTS, "variant {variant} out of range");
    let mut out = if variant & 4 != 0 {
        mirror_cols2(mask)
    } else {
        mask.clone()
    };
    for _ in 0..(variant & 3) {
        out = rot90_cw2(&out);
    }
    out
}
