//! Pixel-space kernels: radial basis masks, Gaussian blur, and the
//! focused-region composition that highlights a relation's participants.

use ndarray::{Array2, Array3};

use crate::error::{DataError, Result};

/// Radial basis mask over an H x W grid.
///
/// The value at pixel (x, y) is exp(-((x - cx)^2 + (y - cy)^2) / (2 sigma^2)).
/// The center may lie outside the grid; values stay in (0, 1] and reach 1 only
/// where a grid point coincides with the center.
pub fn rbf_mask(center: (f64, f64), sigma: f64, shape: (usize, usize)) -> Result<Array2<f64>> {
    if !(sigma > 0.0) {
        return Err(DataError::InvalidParameter(format!(
            "rbf sigma must be positive, got {sigma}"
        )));
    }
    let (h, w) = shape;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (cx, cy) = center;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            out[[y, x]] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    Ok(out)
}

/// Reflects an index into [0, n) with whole-sample symmetry (abcd|dcba).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    if m < n { m as usize } else { (2 * n - 1 - m) as usize }
}

/// One-dimensional Gaussian taps truncated at +-3 sigma and renormalized to sum 1.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 * inv).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur of an H x W x 3 image.
///
/// The kernel is truncated at +-3 sigma and renormalized; out-of-range taps
/// read reflected samples. A sigma of zero returns the input unchanged.
pub fn gaussian_blur(image: &Array3<f64>, sigma: f64) -> Result<Array3<f64>> {
    if sigma < 0.0 {
        return Err(DataError::InvalidParameter(format!(
            "blur sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (h, w, c) = image.dim();
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as i64;

    let mut horiz = Array3::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, tap) in taps.iter().enumerate() {
                    let sx = reflect(x as i64 + t as i64 - radius, w);
                    acc += tap * image[[y, sx, ch]];
                }
                horiz[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, tap) in taps.iter().enumerate() {
                    let sy = reflect(y as i64 + t as i64 - radius, h);
                    acc += tap * horiz[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    Ok(out)
}

/// Blends a scene image with its blurred version under the max of two radial
/// basis masks centered on the relation's participants.
///
/// Output pixel = w * image + (1 - w) * blur, with w the pointwise maximum of
/// the two masks, so focused pixels keep the original appearance and the rest
/// fades toward the blur.
pub fn compose_focused_region(
    image: &Array3<f64>,
    center_1: (f64, f64),
    center_2: (f64, f64),
    sigma_rbf: f64,
    sigma_blur: f64,
) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    let mask_1 = rbf_mask(center_1, sigma_rbf, (h, w))?;
    let mask_2 = rbf_mask(center_2, sigma_rbf, (h, w))?;
    let blurred = gaussian_blur(image, sigma_blur)?;
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let weight = mask_1[[y, x]].max(mask_2[[y, x]]);
            for ch in 0..c {
                out[[y, x, ch]] =
                    weight * image[[y, x, ch]] + (1.0 - weight) * blurred[[y, x, ch]];
            }
        }
    }
    Ok(out)
}

/// Pointwise maximum of the two participant masks, used as the ground-truth
/// weight map for relation localization.
pub fn focus_weight_map(
    center_1: (f64, f64),
    center_2: (f64, f64),
    sigma_rbf: f64,
    shape: (usize, usize),
) -> Result<Array2<f64>> {
    let mask_1 = rbf_mask(center_1, sigma_rbf, shape)?;
    let mask_2 = rbf_mask(center_2, sigma_rbf, shape)?;
    let mut out = mask_1;
    out.zip_mut_with(&mask_2, |a, b| *a = a.max(*b));
    Ok(out)
}
