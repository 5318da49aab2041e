//! Visual artifacts for the `eval` viz task: relevance heatmap overlays
//! and top-k retrieval accuracy curves rendered as PNGs.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

/// Blend strength of the heatmap at full relevance.
const HEAT_ALPHA: f64 = 0.6;
/// Tint applied to hot pixels.
const HEAT_COLOR: [f64; 3] = [1.0, 0.2, 0.1];

const PLOT_W: u32 = 360;
const PLOT_H: u32 = 240;
const MARGIN: i64 = 32;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blends a relevance map into an RGB scene image; hot pixels shift toward
/// red while cold pixels keep their original color.
pub fn heatmap_overlay(image: &Array3<f64>, map: &Array2<f64>) -> Result<RgbImage> {
    let (h, w, c) = image.dim();
    anyhow::ensure!(c == 3, "expected 3 channels, got {c}");
    anyhow::ensure!(
        map.dim() == (h, w),
        "relevance map {:?} does not match a {h}x{w} image",
        map.dim()
    );
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let m = map[[y, x]].clamp(0.0, 1.0) * HEAT_ALPHA;
            let px = [0usize, 1, 2]
                .map(|ch| to_u8(image[[y, x, ch]] * (1.0 - m) + HEAT_COLOR[ch] * m));
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// Saves an image, creating parent directories as needed.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create directory {}", parent.display()))?;
    }
    img.save(path)
        .with_context(|| format!("cannot write image {}", path.display()))
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_marker(img: &mut RgbImage, (x, y): (i64, i64), color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, color);
        }
    }
}

/// Renders top-k accuracy against k as a single polyline and saves it.
/// Accuracies must lie in [0, 1]; the y axis always spans that range.
pub fn retrieval_curve(path: &Path, points: &[(usize, f64)]) -> Result<()> {
    anyhow::ensure!(!points.is_empty(), "retrieval curve needs at least one point");
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([60, 60, 60]);
    let grid = Rgb([220, 220, 220]);
    let line = Rgb([30, 90, 200]);

    let x0 = MARGIN;
    let x1 = PLOT_W as i64 - 12;
    let y0 = PLOT_H as i64 - MARGIN;
    let y1 = 12;
    let k_max = points.iter().map(|&(k, _)| k).max().unwrap_or(1).max(1) as f64;
    let px = |k: usize| x0 + (((k as f64) / k_max) * (x1 - x0) as f64).round() as i64;
    let py = |acc: f64| y0 - ((acc.clamp(0.0, 1.0)) * (y0 - y1) as f64).round() as i64;

    for quarter in 1..=3 {
        let gy = py(quarter as f64 * 0.25);
        draw_line(&mut img, (x0, gy), (x1, gy), grid);
    }
    draw_line(&mut img, (x0, y0), (x1, y0), axis);
    draw_line(&mut img, (x0, y0), (x0, y1), axis);

    let mut coords: Vec<(i64, i64)> =
        points.iter().map(|&(k, acc)| (px(k), py(acc))).collect();
    coords.sort_by_key(|&(x, _)| x);
    for pair in coords.windows(2) {
        draw_line(&mut img, pair[0], pair[1], line);
    }
    for &p in &coords {
        draw_marker(&mut img, p, line);
    }
    save_image(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn overlay_preserves_cold_pixels_and_tints_hot_ones() {
        let image = Array3::from_elem((4, 4, 3), 0.5);
        let mut map = Array2::zeros((4, 4));
        map[[2, 3]] = 1.0;
        let out = heatmap_overlay(&image, &map).unwrap();
        let cold = out.get_pixel(0, 0).0;
        assert_eq!(cold, [128, 128, 128]);
        let hot = out.get_pixel(3, 2).0;
        // 0.4 * original + 0.6 * tint, channel by channel.
        assert_eq!(hot[0], to_u8(0.5 * 0.4 + 1.0 * 0.6));
        assert_eq!(hot[1], to_u8(0.5 * 0.4 + 0.2 * 0.6));
        assert!(hot[0] > hot[1] && hot[1] > hot[2]);
    }

    #[test]
    fn overlay_rejects_mismatched_map() {
        let image = Array3::from_elem((4, 4, 3), 0.5);
        let map = Array2::zeros((3, 4));
        assert!(heatmap_overlay(&image, &map).is_err());
    }

    #[test]
    fn curve_file_is_written() {
        let dir = std::env::temp_dir().join(format!(
            "swviz_{}_{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos()
        ));
        let path = dir.join("curve.png");
        retrieval_curve(&path, &[(1, 0.4), (5, 0.7), (10, 0.9)]).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert!(meta.len() > 0);
        std::fs::remove_dir_all(&dir).ok();
    }
}
