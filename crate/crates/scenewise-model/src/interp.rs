//! Image interpolation plumbing: bounding-box crops with bilinear resize,
//! and a sparse-as-dense bilinear upsampling operator for differentiable
//! map upscaling.

use ndarray::{Array2, Array3};
use scenewise_data::BoundingBox;

/// Source coordinate for an output index under half-pixel alignment.
fn src_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear weights for one output index: (low index, high index, high weight).
fn lerp_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let x = src_coord(dst, dst_len, src_len);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, x - lo as f64)
}

/// Resizes an (h, w, c) image to (out_h, out_w, c) with bilinear filtering.
pub fn bilinear_resize(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let mut out = Array3::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let (y0, y1, wy) = lerp_taps(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, wx) = lerp_taps(ox, out_w, w);
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - wx) + src[[y0, x1, ch]] * wx;
                let bot = src[[y1, x0, ch]] * (1.0 - wx) + src[[y1, x1, ch]] * wx;
                out[[oy, ox, ch]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Extracts a bounding-box crop and resizes it to `out_size` square.
/// Degenerate boxes are padded to at least one source pixel.
pub fn crop_resize(image: &Array3<f64>, bbox: &BoundingBox, out_size: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let x0 = (bbox.x_min as usize).min(w - 1);
    let y0 = (bbox.y_min as usize).min(h - 1);
    let x1 = (bbox.x_max as usize).clamp(x0 + 1, w);
    let y1 = (bbox.y_max as usize).clamp(y0 + 1, h);
    let mut crop = Array3::zeros((y1 - y0, x1 - x0, c));
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..c {
                crop[[y - y0, x - x0, ch]] = image[[y, x, ch]];
            }
        }
    }
    bilinear_resize(&crop, out_size, out_size)
}

/// Dense (dst_h*dst_w) x (src_h*src_w) matrix applying bilinear upsampling
/// to a row-major flattened map; matches `bilinear_resize` exactly.
pub fn bilinear_upsample_matrix(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Array2<f64> {
    let mut m = Array2::zeros((dst_h * dst_w, src_h * src_w));
    for oy in 0..dst_h {
        let (y0, y1, wy) = lerp_taps(oy, dst_h, src_h);
        for ox in 0..dst_w {
            let (x0, x1, wx) = lerp_taps(ox, dst_w, src_w);
            let row = oy * dst_w + ox;
            m[[row, y0 * src_w + x0]] += (1.0 - wy) * (1.0 - wx);
            m[[row, y0 * src_w + x1]] += (1.0 - wy) * wx;
            m[[row, y1 * src_w + x0]] += wy * (1.0 - wx);
            m[[row, y1 * src_w + x1]] += wy * wx;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn gradient_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 1), |(y, x, _)| y as f64 + 10.0 * x as f64)
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = gradient_image(5, 7);
        let out = bilinear_resize(&img, 5, 7);
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant_under_resize() {
        let img = Array3::from_elem((4, 4, 3), 0.37);
        let out = bilinear_resize(&img, 9, 13);
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_interpolates_midpoints() {
        // 1-D ramp [0, 1] widened to 4 columns: half-pixel alignment puts
        // the outer samples on the edge values and the inner ones at 1/4, 3/4.
        let img = Array3::from_shape_fn((1, 2, 1), |(_, x, _)| x as f64);
        let out = bilinear_resize(&img, 1, 4);
        let got: Vec<f64> = out.iter().copied().collect();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn crop_of_degenerate_box_still_samples_one_pixel() {
        let mut img = Array3::zeros((8, 8, 3));
        img[[3, 4, 0]] = 0.9;
        let bbox = BoundingBox { x_min: 4, y_min: 3, x_max: 4, y_max: 3 };
        let out = crop_resize(&img, &bbox, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert!((out[[y, x, 0]] - 0.9).abs() < 1e-12);
                assert_eq!(out[[y, x, 1]], 0.0);
            }
        }
    }

    #[test]
    fn upsample_matrix_matches_resize() {
        let img = Array3::from_shape_fn((3, 3, 1), |(y, x, _)| ((y * 3 + x) as f64 * 1.3).sin());
        let direct = bilinear_resize(&img, 7, 7);
        let m = bilinear_upsample_matrix(3, 3, 7, 7);
        let flat: Array1<f64> = Array1::from_iter(img.iter().copied());
        let up = m.dot(&flat);
        for (i, v) in up.iter().enumerate() {
            let (y, x) = (i / 7, i % 7);
            assert!((v - direct[[y, x, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_matrix_rows_sum_to_one() {
        let m = bilinear_upsample_matrix(3, 4, 11, 9);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
