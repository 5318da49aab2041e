//! Procedural scene synthesis.
//!
//! Scenes are built from parametric glyphs (shape x color classes) laid out by
//! a small set of layout motifs. Relation predicates are geometric and derived
//! from the final boxes, so every annotation is verifiable from pixels, and the
//! action label is a deterministic function of the relation multiset.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curate::negatives::{builtin_antonyms, enumerate_negatives};
use crate::error::{DataError, Result};
use crate::kernels::compose_focused_region;
use crate::types::{
    BoundingBox, RelationAnnotation, SceneConfig, SceneObject, SceneRecord, Triplet,
};

/// Relation predicates in label-index order.
pub const PREDICATES: [&str; 6] = ["left of", "above", "inside", "touching", "near", "far from"];

/// Pool of action names; indices beyond the pool fall back to "formation {i}".
pub const ACTION_POOL: [&str; 16] = [
    "parading", "mustering", "stacking", "cascading", "nesting", "sheltering", "huddling",
    "crowding", "mingling", "gathering", "scattering", "dispersing", "flanking", "guarding",
    "pairing", "circling",
];

/// Box gap (pixels) at or below which two objects count as touching.
pub const TOUCH_MAX_GAP: i64 = 1;
/// Box gap at or below which two objects count as near.
pub const NEAR_MAX_GAP: i64 = 8;
/// Box gap above which two objects count as far from each other.
pub const FAR_MIN_GAP: i64 = 20;
/// Scenes with at least this many objects set the crowded bit of the action.
pub const CROWDED_MIN_OBJECTS: usize = 4;

const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.85, 0.20]),
    ("blue", [0.20, 0.30, 0.90]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("cyan", [0.15, 0.80, 0.85]),
];

const SHAPES: [&str; 4] = ["block", "ring", "dot", "cross"];

const BACKGROUND: f64 = 0.06;

/// Largest number of distinct shape x color classes available.
pub fn max_object_classes() -> usize {
    SHAPES.len() / 2 * 2 * COLORS.len() * 2 / 2
}

/// Shape and color indices of a class id.
fn class_parts(class: usize) -> (usize, usize) {
    let band = class / (2 * COLORS.len());
    let within = class % (2 * COLORS.len());
    (2 * band + within % 2, within / 2)
}

/// Display name of an object class, e.g. "red ring".
pub fn object_class_name(class: usize) -> String {
    let (shape, color) = class_parts(class);
    format!("{} {}", COLORS[color].0, SHAPES[shape])
}

/// True when the class renders as a hollow ring.
fn is_ring_class(class: usize) -> bool {
    let (shape, _) = class_parts(class);
    SHAPES[shape] == "ring"
}

/// Action name for an action index.
pub fn action_name(index: usize) -> String {
    ACTION_POOL
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("formation {index}"))
}

/// Classifies an unordered object pair into an ordered relation triplet.
///
/// The cascade is mutually exclusive: strict containment wins, then box gap
/// bands (touching, near, far), then the dominant separation axis picks
/// "left of" or "above" with the left or upper box as subject. With a
/// restricted predicate set, pairs whose predicate is unavailable fall back to
/// a directional label when the boxes are disjoint on that axis, or to None.
///
/// Returns (subject index, predicate index, object index) into the input pair.
pub fn classify_pair(
    a: &BoundingBox,
    b: &BoundingBox,
    n_predicates: usize,
) -> Option<(usize, usize, usize)> {
    let avail = |p: usize| p < n_predicates;
    let horizontal = |a_idx: usize, b_idx: usize, a: &BoundingBox, b: &BoundingBox| {
        if a.x_max <= b.x_min {
            Some((a_idx, 0, b_idx))
        } else if b.x_max <= a.x_min {
            Some((b_idx, 0, a_idx))
        } else {
            None
        }
    };
    let vertical = |a_idx: usize, b_idx: usize, a: &BoundingBox, b: &BoundingBox| {
        if a.y_max <= b.y_min {
            Some((a_idx, 1, b_idx))
        } else if b.y_max <= a.y_min {
            Some((b_idx, 1, a_idx))
        } else {
            None
        }
    };
    // Directional fallback used when a band predicate is not configured.
    let directional = |a: &BoundingBox, b: &BoundingBox| {
        let h = horizontal(0, 1, a, b);
        let v = vertical(0, 1, a, b);
        let dx = a.x_gap(b);
        let dy = a.y_gap(b);
        match (h, v) {
            (Some(h), Some(v)) => {
                if dx >= dy || !avail(1) {
                    Some(h)
                } else {
                    Some(v)
                }
            }
            (Some(h), None) => Some(h),
            (None, Some(v)) if avail(1) => Some(v),
            _ => None,
        }
    };

    if a.strictly_inside(b) {
        if avail(2) {
            return Some((0, 2, 1));
        }
        return directional(a, b);
    }
    if b.strictly_inside(a) {
        if avail(2) {
            return Some((1, 2, 0));
        }
        return directional(a, b);
    }
    let gap = a.chebyshev_gap(b);
    let band = if gap <= TOUCH_MAX_GAP {
        Some(3)
    } else if gap <= NEAR_MAX_GAP {
        Some(4)
    } else if gap > FAR_MIN_GAP {
        Some(5)
    } else {
        None
    };
    if let Some(p) = band {
        if avail(p) {
            // Symmetric predicates take the first input as subject.
            return Some((0, p, 1));
        }
        return directional(a, b);
    }
    directional(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motif {
    ChainH,
    ChainV,
    Nested,
    Huddle,
    Orbit,
    Spread,
}

impl Motif {
    const ALL: [Motif; 6] = [
        Motif::ChainH,
        Motif::ChainV,
        Motif::Nested,
        Motif::Huddle,
        Motif::Orbit,
        Motif::Spread,
    ];

    /// Predicate index this motif is built around.
    fn predicate(&self) -> usize {
        match self {
            Motif::ChainH => 0,
            Motif::ChainV => 1,
            Motif::Nested => 2,
            Motif::Huddle => 3,
            Motif::Orbit => 4,
            Motif::Spread => 5,
        }
    }

    fn feasible(&self, config: &SceneConfig, ring_available: bool) -> bool {
        let size = config.image_size as i64;
        if self.predicate() >= config.n_relation_classes {
            return false;
        }
        match self {
            // A line of two glyphs with a directional gap must fit.
            Motif::ChainH | Motif::ChainV => size >= 2 * 8 + 10 + 4,
            Motif::Nested => ring_available && size >= 18 + 4,
            Motif::Huddle => size >= 3 * 10 + 4,
            Motif::Orbit => size >= 10 + 2 * (8 + 7) + 4,
            Motif::Spread => size >= 2 * 9 + FAR_MIN_GAP + 3 + 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Planned {
    x: i64,
    y: i64,
    size: i64,
}

impl Planned {
    fn bbox(&self) -> BoundingBox {
        BoundingBox::new(
            self.x as u32,
            self.y as u32,
            (self.x + self.size) as u32,
            (self.y + self.size) as u32,
        )
    }

    fn in_bounds(&self, canvas: i64) -> bool {
        self.x >= 1 && self.y >= 1 && self.x + self.size <= canvas - 1 && self.y + self.size <= canvas - 1
    }
}

/// Rejects layouts where a later glyph is buried under an earlier one.
fn placement_ok(planned: &[Planned], candidate: Planned, index: usize) -> bool {
    if !candidate.in_bounds(i64::MAX / 4) {
        return false;
    }
    let cand_box = candidate.bbox();
    for p in planned.iter().take(index) {
        let other = p.bbox();
        let inter = cand_box.intersection_area(&other);
        let min_area = cand_box.area().min(other.area());
        if inter * 2 >= min_area {
            // Heavy overlap is only allowed for an intended strict nesting
            // where the inner glyph is drawn later and stays visible.
            let nested_visible = cand_box.strictly_inside(&other);
            if !nested_visible {
                return false;
            }
        }
    }
    true
}

fn plan_chain(
    rng: &mut ChaCha8Rng,
    n: usize,
    canvas: i64,
    horizontal: bool,
) -> Option<Vec<Planned>> {
    let glyph = if canvas < 56 { 8 } else { rng.gen_range(8..=11) };
    let pitch_gap = rng.gen_range(10..=12.min((canvas - 4 - 2 * glyph).max(10)));
    let per_line = (((canvas - 4 + pitch_gap) / (glyph + pitch_gap)) as usize).max(2);
    let lines = n.div_ceil(per_line);
    let line_pitch = glyph + rng.gen_range(10..=13);
    if 2 + lines as i64 * glyph + (lines as i64 - 1) * (line_pitch - glyph) > canvas - 1 {
        return None;
    }
    let mut out = Vec::with_capacity(n);
    let mut main = 2i64;
    let mut cross = 2i64;
    let mut in_line = 0usize;
    for _ in 0..n {
        if in_line == per_line {
            in_line = 0;
            main = 2;
            cross += line_pitch;
        }
        let jitter = rng.gen_range(-2..=2);
        let (x, y) = if horizontal {
            (main, (cross + jitter).max(1))
        } else {
            ((cross + jitter).max(1), main)
        };
        let p = Planned { x, y, size: glyph };
        if !p.in_bounds(canvas) {
            return None;
        }
        out.push(p);
        main += glyph + rng.gen_range(10..=pitch_gap.max(10));
        in_line += 1;
    }
    Some(out)
}

fn plan_nested(rng: &mut ChaCha8Rng, n: usize, canvas: i64) -> Option<Vec<Planned>> {
    let outer = rng.gen_range(18..=22.min(canvas - 4));
    let ox = rng.gen_range(2..=(canvas - 2 - outer).max(2).min(canvas - 2 - outer));
    let oy = rng.gen_range(2..=(canvas - 2 - outer));
    let inner = rng.gen_range(6..=(outer - 10).max(6).min(8));
    let slack = outer - inner - 6;
    let ix = ox + 3 + rng.gen_range(0..=slack.max(0));
    let iy = oy + 3 + rng.gen_range(0..=slack.max(0));
    let mut out = vec![
        Planned { x: ox, y: oy, size: outer },
        Planned { x: ix, y: iy, size: inner },
    ];
    // Extra objects attach around the outer ring at near or directional range.
    for extra in 2..n {
        let size = rng.gen_range(8..=10);
        let mut placed = false;
        for _ in 0..40 {
            let gap = if extra % 2 == 0 {
                rng.gen_range(3..=7)
            } else {
                rng.gen_range(10..=16)
            };
            let side = rng.gen_range(0..4);
            let along = rng.gen_range(-2..=(outer - size + 2).max(-2));
            let p = match side {
                0 => Planned { x: ox + outer + gap, y: oy + along, size },
                1 => Planned { x: ox - gap - size, y: oy + along, size },
                2 => Planned { x: ox + along, y: oy + outer + gap, size },
                _ => Planned { x: ox + along, y: oy - gap - size, size },
            };
            if p.in_bounds(canvas) && placement_ok(&out, p, out.len()) {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

fn plan_huddle(rng: &mut ChaCha8Rng, n: usize, canvas: i64) -> Option<Vec<Planned>> {
    let first = Planned {
        x: canvas / 2 - 6 + rng.gen_range(-4..=4),
        y: canvas / 2 - 6 + rng.gen_range(-4..=4),
        size: rng.gen_range(9..=12),
    };
    if !first.in_bounds(canvas) {
        return None;
    }
    let mut out = vec![first];
    for _ in 1..n {
        let size = rng.gen_range(9..=12);
        let mut placed = false;
        for _ in 0..60 {
            let anchor = out[rng.gen_range(0..out.len())];
            let gap = rng.gen_range(-2..=TOUCH_MAX_GAP);
            let side = rng.gen_range(0..4);
            let cross = rng.gen_range(-(size - 4)..=(anchor.size - 4));
            let p = match side {
                0 => Planned { x: anchor.x + anchor.size + gap, y: anchor.y + cross, size },
                1 => Planned { x: anchor.x - gap - size, y: anchor.y + cross, size },
                2 => Planned { x: anchor.x + cross, y: anchor.y + anchor.size + gap, size },
                _ => Planned { x: anchor.x + cross, y: anchor.y - gap - size, size },
            };
            let touch = p.bbox().chebyshev_gap(&anchor.bbox());
            if p.in_bounds(canvas)
                && touch <= TOUCH_MAX_GAP
                && placement_ok(&out, p, out.len())
            {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

fn plan_orbit(rng: &mut ChaCha8Rng, n: usize, canvas: i64) -> Option<Vec<Planned>> {
    let hub_size = rng.gen_range(9..=12);
    let hub = Planned {
        x: (canvas - hub_size) / 2 + rng.gen_range(-2..=2),
        y: (canvas - hub_size) / 2 + rng.gen_range(-2..=2),
        size: hub_size,
    };
    let mut out = vec![hub];
    let mut sides = [0usize, 1, 2, 3];
    sides.shuffle(rng);
    for (k, _) in (1..n).enumerate() {
        let size = rng.gen_range(8..=10);
        let mut placed = false;
        for attempt in 0..24 {
            let gap = rng.gen_range(3..=NEAR_MAX_GAP - 1);
            let side = sides[(k + attempt) % 4];
            let cross = hub.size / 2 - size / 2 + rng.gen_range(-2..=2);
            let p = match side {
                0 => Planned { x: hub.x + hub.size + gap, y: hub.y + cross, size },
                1 => Planned { x: hub.x - gap - size, y: hub.y + cross, size },
                2 => Planned { x: hub.x + cross, y: hub.y + hub.size + gap, size },
                _ => Planned { x: hub.x + cross, y: hub.y - gap - size, size },
            };
            if p.in_bounds(canvas) && placement_ok(&out, p, out.len()) {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

fn plan_spread(rng: &mut ChaCha8Rng, n: usize, canvas: i64) -> Option<Vec<Planned>> {
    let size = rng.gen_range(8..=9);
    let lo = 2i64;
    let hi = canvas - 2 - size;
    let corners = [(lo, lo), (hi, hi), (hi, lo), (lo, hi)];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (x, y) = if k < 4 {
            let (cx, cy) = corners[k];
            (cx + rng.gen_range(0..=2) * (if cx == lo { 1 } else { -1 }),
             cy + rng.gen_range(0..=2) * (if cy == lo { 1 } else { -1 }))
        } else {
            ((canvas - size) / 2, (canvas - size) / 2)
        };
        let p = Planned { x, y, size };
        if !p.in_bounds(canvas) || !placement_ok(&out, p, out.len()) {
            return None;
        }
        out.push(p);
    }
    // The far band must actually hold for the corner pairs.
    if n >= 2 && out[0].bbox().chebyshev_gap(&out[1].bbox()) <= FAR_MIN_GAP {
        return None;
    }
    Some(out)
}

fn plan_motif(
    motif: Motif,
    rng: &mut ChaCha8Rng,
    n: usize,
    canvas: i64,
) -> Option<Vec<Planned>> {
    let planned = match motif {
        Motif::ChainH => plan_chain(rng, n, canvas, true)?,
        Motif::ChainV => plan_chain(rng, n, canvas, false)?,
        Motif::Nested => plan_nested(rng, n, canvas)?,
        Motif::Huddle => plan_huddle(rng, n, canvas)?,
        Motif::Orbit => plan_orbit(rng, n, canvas)?,
        Motif::Spread => plan_spread(rng, n, canvas)?,
    };
    for (i, p) in planned.iter().enumerate() {
        if !p.in_bounds(canvas) || !placement_ok(&planned, *p, i) {
            return None;
        }
    }
    Some(planned)
}

/// Draws a glyph and returns the pixel center of mass of the drawn area.
fn draw_glyph(image: &mut Array3<f64>, p: Planned, class: usize) -> (f64, f64) {
    let (shape_idx, color_idx) = class_parts(class);
    let rgb = COLORS[color_idx].1;
    let s = p.size;
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    let mut count = 0.0;
    for dy in 0..s {
        for dx in 0..s {
            let inside = match SHAPES[shape_idx] {
                "block" => true,
                "ring" => dx < 2 || dy < 2 || dx >= s - 2 || dy >= s - 2,
                "dot" => {
                    let c = (s as f64 - 1.0) / 2.0;
                    let r = s as f64 / 2.0 - 0.5;
                    (dx as f64 - c).powi(2) + (dy as f64 - c).powi(2) <= r * r
                }
                _ => {
                    let t = (s / 4).max(2);
                    let lo = (s - t) / 2;
                    (dx >= lo && dx < lo + t) || (dy >= lo && dy < lo + t)
                }
            };
            if inside {
                let (x, y) = ((p.x + dx) as usize, (p.y + dy) as usize);
                for ch in 0..3 {
                    image[[y, x, ch]] = rgb[ch];
                }
                sum_x += (p.x + dx) as f64;
                sum_y += (p.y + dy) as f64;
                count += 1.0;
            }
        }
    }
    (sum_x / count, sum_y / count)
}

/// Rounds an intensity grid to the 8-bit values the PNG files will store.
pub fn quantize(image: &Array3<f64>) -> Array3<f64> {
    image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Mixes a base seed and a scene index into an independent per-scene seed.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Symmetric-orientation closure of a scene's true pair relations, used to
/// reject false negatives phrased with swapped participants.
fn truth_closure(names: &[String], preds: &[(usize, usize, usize)]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &(s, p, o) in preds {
        let t = (names[s].clone(), PREDICATES[p].to_string(), names[o].clone());
        if !out.contains(&t) {
            out.push(t);
        }
        if matches!(p, 3 | 4 | 5) {
            let rev = (names[o].clone(), PREDICATES[p].to_string(), names[s].clone());
            if !out.contains(&rev) {
                out.push(rev);
            }
        }
    }
    out
}

/// Generates a single deterministic scene for (config, seed).
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = config.image_size as i64;
    let ring_classes: Vec<usize> =
        (0..config.n_object_classes).filter(|&c| is_ring_class(c)).collect();
    let motifs: Vec<Motif> = Motif::ALL
        .iter()
        .copied()
        .filter(|m| m.feasible(config, !ring_classes.is_empty()))
        .collect();
    if motifs.is_empty() {
        return Err(DataError::Generation {
            seed,
            reason: "no layout motif is feasible for this config".into(),
        });
    }

    for _attempt in 0..32 {
        let motif = motifs[rng.gen_range(0..motifs.len())];
        let (olo, ohi) = config.objects_per_scene;
        let n = rng.gen_range(olo..=ohi).max(2);
        let Some(planned) = plan_motif(motif, &mut rng, n, canvas) else {
            continue;
        };

        // Distinct classes when the pool allows; nested needs a ring outermost.
        let mut classes: Vec<usize> = if n <= config.n_object_classes {
            let mut pool: Vec<usize> = (0..config.n_object_classes).collect();
            pool.shuffle(&mut rng);
            pool.truncate(n);
            pool
        } else {
            (0..n).map(|_| rng.gen_range(0..config.n_object_classes)).collect()
        };
        if motif == Motif::Nested && !is_ring_class(classes[0]) {
            if let Some(pos) = classes.iter().position(|c| is_ring_class(*c)) {
                classes.swap(0, pos);
            } else {
                classes[0] = ring_classes[rng.gen_range(0..ring_classes.len())];
            }
        }

        let mut image = Array3::from_elem(
            (config.image_size, config.image_size, 3),
            BACKGROUND,
        );
        let mut objects = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        for (p, class) in planned.iter().zip(&classes) {
            let com = draw_glyph(&mut image, *p, *class);
            centers.push(com);
            objects.push(SceneObject { name: object_class_name(*class), bbox: p.bbox() });
        }
        let image = quantize(&image);

        // Classify every pair; pairs without an expressible predicate are skipped.
        let mut pair_preds: Vec<(usize, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if let Some((s, p, o)) =
                    classify_pair(&objects[i].bbox, &objects[j].bbox, config.n_relation_classes)
                {
                    let map = [i, j];
                    pair_preds.push((map[s], p, map[o]));
                }
            }
        }
        if pair_preds.is_empty() {
            continue;
        }

        // Action: predominant predicate plus a crowded bit.
        let mut counts = [0usize; PREDICATES.len()];
        for &(_, p, _) in &pair_preds {
            counts[p] += 1;
        }
        let predominant = (0..PREDICATES.len()).max_by_key(|&p| (counts[p], usize::MAX - p));
        let predominant = predominant.unwrap();
        let crowded = usize::from(n >= CROWDED_MIN_OBJECTS);
        let action = action_name((2 * predominant + crowded) % config.n_actions);

        // Annotate a sample of the classified pairs.
        let (rlo, rhi) = config.relations_per_scene;
        let r_hi = rhi.min(pair_preds.len());
        let r_lo = rlo.min(r_hi);
        let r = rng.gen_range(r_lo..=r_hi);
        let mut chosen: Vec<usize> = (0..pair_preds.len()).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(r);
        chosen.sort_unstable();

        let names: Vec<String> = objects.iter().map(|o| o.name.clone()).collect();
        let truths = truth_closure(&names, &pair_preds);
        let antonyms = builtin_antonyms();
        let mut relations = Vec::with_capacity(r);
        let mut ok = true;
        for &pair_idx in &chosen {
            let (s, p, o) = pair_preds[pair_idx];
            let triplet = (
                names[s].clone(),
                PREDICATES[p].to_string(),
                names[o].clone(),
            );
            let negatives = match enumerate_negatives(&names, &triplet, &truths, &antonyms, 3) {
                Ok(neg) => neg,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let focused = quantize(&compose_focused_region(
                &image,
                centers[s],
                centers[o],
                config.rbf_sigma,
                config.blur_sigma,
            )?);
            relations.push(RelationAnnotation {
                triplet,
                object_indices: (s, o),
                centers: (centers[s], centers[o]),
                focused_region: focused,
                negatives,
            });
        }
        if !ok || relations.is_empty() {
            continue;
        }

        let record = SceneRecord { image, action, objects, relations };
        record.validate(config)?;
        return Ok(record);
    }
    Err(DataError::Generation {
        seed,
        reason: "could not satisfy layout constraints within 32 attempts".into(),
    })
}
