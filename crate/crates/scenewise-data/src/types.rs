//! Domain types shared by scene synthesis, dataset rendering, and curation.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{DataError, Result};

/// Number of binomial pairs C(n, 2).
pub fn pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Configuration for procedural scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Side length of the square canvas in pixels.
    pub image_size: usize,
    /// Number of distinct action labels.
    pub n_actions: usize,
    /// Number of distinct object classes.
    pub n_object_classes: usize,
    /// Number of distinct relation predicates.
    pub n_relation_classes: usize,
    /// Inclusive range of objects placed per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of annotated relations per scene.
    pub relations_per_scene: (usize, usize),
    /// Sigma of the radial basis masks, in pixels.
    pub rbf_sigma: f64,
    /// Sigma of the background Gaussian blur, in pixels.
    pub blur_sigma: f64,
    /// Base seed; per-scene seeds derive from it.
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_actions: 8,
            n_object_classes: 12,
            n_relation_classes: 6,
            objects_per_scene: (2, 5),
            relations_per_scene: (1, 3),
            rbf_sigma: 6.0,
            blur_sigma: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Checks the documented invariants, returning a description of the first violation.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.image_size < 16 {
            return err(format!("image_size {} < 16", self.image_size));
        }
        if self.n_actions < 1 || self.n_object_classes < 1 || self.n_relation_classes < 1 {
            return err("all class counts must be >= 1".into());
        }
        if self.n_relation_classes > crate::synth::PREDICATES.len() {
            return err(format!(
                "n_relation_classes {} exceeds the {} supported predicates",
                self.n_relation_classes,
                crate::synth::PREDICATES.len()
            ));
        }
        if self.n_object_classes > crate::synth::max_object_classes() {
            return err(format!(
                "n_object_classes {} exceeds the {} available shape-color glyphs",
                self.n_object_classes,
                crate::synth::max_object_classes()
            ));
        }
        let (olo, ohi) = self.objects_per_scene;
        let (rlo, rhi) = self.relations_per_scene;
        if olo < 1 || olo > ohi {
            return err(format!("objects_per_scene range ({olo}, {ohi}) is empty or zero"));
        }
        if rlo < 1 || rlo > rhi {
            return err(format!("relations_per_scene range ({rlo}, {rhi}) is empty or zero"));
        }
        if rhi > pairs(ohi) {
            return err(format!(
                "relations_per_scene max {rhi} exceeds C({ohi}, 2) = {}",
                pairs(ohi)
            ));
        }
        if !(self.rbf_sigma > 0.0) || !(self.blur_sigma > 0.0) {
            return err("sigmas must be positive".into());
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel coordinates, inclusive of min and exclusive of max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    /// Geometric center of the box.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    /// True when this box lies strictly inside `other` on all four sides.
    pub fn strictly_inside(&self, other: &BoundingBox) -> bool {
        self.x_min > other.x_min
            && self.x_max < other.x_max
            && self.y_min > other.y_min
            && self.y_max < other.y_max
    }

    /// Signed horizontal gap to `other`: positive when separated, negative when overlapping.
    pub fn x_gap(&self, other: &BoundingBox) -> i64 {
        let a = other.x_min as i64 - self.x_max as i64;
        let b = self.x_min as i64 - other.x_max as i64;
        a.max(b)
    }

    /// Signed vertical gap to `other`.
    pub fn y_gap(&self, other: &BoundingBox) -> i64 {
        let a = other.y_min as i64 - self.y_max as i64;
        let b = self.y_min as i64 - other.y_max as i64;
        a.max(b)
    }

    /// Chebyshev box gap: maximum of the axis gaps. Negative means area overlap.
    pub fn chebyshev_gap(&self, other: &BoundingBox) -> i64 {
        self.x_gap(other).max(self.y_gap(other))
    }

    /// Area of intersection with `other` in pixels.
    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = (self.x_max.min(other.x_max) as i64 - self.x_min.max(other.x_min) as i64).max(0);
        let h = (self.y_max.min(other.y_max) as i64 - self.y_min.max(other.y_min) as i64).max(0);
        (w * h) as u64
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// Smallest box covering both inputs.
    pub fn union_box(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    fn within(&self, size: usize) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max as usize <= size
            && self.y_max as usize <= size
    }
}

/// A placed object: class label plus its rendered bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub bbox: BoundingBox,
}

/// A subject-predicate-object label triplet.
pub type Triplet = (String, String, String);

/// Formats a triplet as a space-joined caption.
pub fn triplet_caption(t: &Triplet) -> String {
    format!("{} {} {}", t.0, t.1, t.2)
}

/// One annotated relation of a scene, with its focused region and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationAnnotation {
    /// (object_1, relation, object_2) label strings.
    pub triplet: Triplet,
    /// Indices of the two participating objects in `SceneRecord::objects`.
    pub object_indices: (usize, usize),
    /// Centers of mass of the two participants, in pixel coordinates.
    pub centers: ((f64, f64), (f64, f64)),
    /// Focused-region image, same shape as the scene image.
    pub focused_region: Array3<f64>,
    /// At least three negative triplets, pairwise distinct, none a positive of the scene.
    pub negatives: Vec<Triplet>,
}

/// A fully rendered scene with annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    /// H x W x 3 intensity grid with values in [0, 1].
    pub image: Array3<f64>,
    /// Scenario-level action label.
    pub action: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<RelationAnnotation>,
}

impl SceneRecord {
    /// Checks the structural invariants of a record against its config.
    pub fn validate(&self, config: &SceneConfig) -> Result<()> {
        let size = config.image_size;
        if self.image.dim() != (size, size, 3) {
            return Err(DataError::InvalidConfig(format!(
                "image shape {:?} does not match config size {size}",
                self.image.dim()
            )));
        }
        for obj in &self.objects {
            if !obj.bbox.within(size) {
                return Err(DataError::InvalidConfig(format!(
                    "bbox {:?} of {:?} escapes the {size}px canvas",
                    obj.bbox, obj.name
                )));
            }
        }
        let positives: Vec<&Triplet> = self.relations.iter().map(|r| &r.triplet).collect();
        for rel in &self.relations {
            let (i, j) = rel.object_indices;
            if i == j || i >= self.objects.len() || j >= self.objects.len() {
                return Err(DataError::InvalidConfig(format!(
                    "relation indices ({i}, {j}) invalid for {} objects",
                    self.objects.len()
                )));
            }
            if rel.focused_region.dim() != self.image.dim() {
                return Err(DataError::InvalidConfig(
                    "focused region shape differs from scene image".into(),
                ));
            }
            if rel.negatives.len() < 3 {
                return Err(DataError::InvalidConfig(format!(
                    "relation {:?} has {} negatives, need >= 3",
                    rel.triplet,
                    rel.negatives.len()
                )));
            }
            for (a, neg) in rel.negatives.iter().enumerate() {
                if positives.iter().any(|p| *p == neg) {
                    return Err(DataError::InvalidConfig(format!(
                        "negative {neg:?} equals a positive triplet"
                    )));
                }
                if rel.negatives[..a].contains(neg) {
                    return Err(DataError::InvalidConfig(format!(
                        "duplicate negative {neg:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of annotated objects.
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    /// Number of annotated relations.
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Label vocabularies actually used by a rendered dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub relations: Vec<String>,
}

/// Manifest describing a rendered dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Schema version of the directory layout.
    pub version: u32,
    /// Echo of the generating configuration.
    pub config: SceneConfig,
    /// Total number of scenes.
    pub n_scenes: usize,
    /// Scene ids per split; disjoint and exhaustive.
    pub splits: BTreeMap<String, Vec<usize>>,
    /// Label vocabularies in canonical order.
    pub vocab: LabelVocab,
    /// Relative path -> sha256 hex digest for every written file.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Ids belonging to a split, empty if the split is absent.
    pub fn split_ids(&self, split: Split) -> &[usize] {
        self.splits.get(split.as_str()).map(Vec::as_slice).unwrap_or(&[])
    }
}
