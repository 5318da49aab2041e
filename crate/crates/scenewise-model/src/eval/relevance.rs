//! Class-token relevance heatmaps from the object visual encoder.

use ndarray::{Array2, Array3};

use crate::encoders::{ScenarioModel, Tower};
use crate::error::Result;
use crate::interp::bilinear_resize;

/// Cosine similarity of every patch token to the class token, reshaped to
/// the patch grid, bilinearly upsampled to the image resolution, and
/// min-max normalized. Normalization runs after upsampling so the output
/// extremes are exactly 0 and 1 (bilinear resampling commutes with the
/// affine rescale, so the two orders agree up to that rescale). A
/// degenerate map (max equals min) becomes all 0.5.
pub fn relevance_map(model: &ScenarioModel, image: &Array3<f64>) -> Result<Array2<f64>> {
    let seq = model.token_sequence(Tower::VisualObject, image)?;
    let side = model.config.grid_side(model.image_size);
    let cls = seq.row(0);
    let cls_norm = cls.dot(&cls).sqrt().max(1e-30);
    let mut sims = Array2::zeros((side, side));
    for (p, token) in seq.outer_iter().skip(1).enumerate() {
        let norm = token.dot(&token).sqrt().max(1e-30);
        sims[[p / side, p % side]] = token.dot(&cls) / (norm * cls_norm);
    }
    let (h, w, _) = image.dim();
    let planar = Array3::from_shape_fn((side, side, 1), |(y, x, _)| sims[[y, x]]);
    let up = bilinear_resize(&planar, h, w);
    let mut map = Array2::from_shape_fn((h, w), |(y, x)| up[[y, x, 0]]);
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        map.fill(0.5);
    } else {
        map.mapv_inplace(|v| (v - min) / (max - min));
    }
    Ok(map)
}
