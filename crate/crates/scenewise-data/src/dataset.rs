//! Dataset rendering and loading: PNG files, annotation records, and the
//! checksummed manifest with hash-based splits.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{DataError, Result};
use crate::synth::{
    action_name, generate_scene, object_class_name, scene_seed, PREDICATES,
};
use crate::types::{
    BoundingBox, DatasetManifest, LabelVocab, RelationAnnotation, SceneConfig, SceneObject,
    SceneRecord, Split, Triplet,
};

/// Current manifest schema version.
pub const MANIFEST_VERSION: u32 = 1;

/// Serialized annotation record; pixel grids live in the PNG files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub id: usize,
    pub action: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<RelationFile>,
}

/// Serialized relation annotation with triplets as 3-element string arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationFile {
    pub triplet: [String; 3],
    pub object_indices: [usize; 2],
    pub centers: [[f64; 2]; 2],
    pub negatives: Vec<[String; 3]>,
}

fn triplet_to_array(t: &Triplet) -> [String; 3] {
    [t.0.clone(), t.1.clone(), t.2.clone()]
}

fn array_to_triplet(a: &[String; 3]) -> Triplet {
    (a[0].clone(), a[1].clone(), a[2].clone())
}

/// Encodes an intensity grid as 8-bit RGB PNG bytes.
pub fn encode_png(grid: &Array3<f64>) -> Result<Vec<u8>> {
    let (h, w, c) = grid.dim();
    if c != 3 {
        return Err(DataError::InvalidParameter(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (grid[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (grid[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (grid[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| DataError::Image { path: PathBuf::from("<buffer>"), reason: e.to_string() })?;
    Ok(bytes)
}

/// Decodes a PNG file into an intensity grid with values v / 255.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.into(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut grid = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            grid[[y as usize, x as usize, ch]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(grid)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// FNV-1a hash of a scene id mixed with the dataset seed; drives the splits.
fn split_hash(id: usize, seed: u64) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in id.to_le_bytes().iter().chain(seed.to_le_bytes().iter()) {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// 80/10/10 split by hash order: deterministic, size-exact, seed-dependent.
pub fn assign_splits(n_scenes: usize, seed: u64) -> BTreeMap<String, Vec<usize>> {
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.sort_by_key(|&id| (split_hash(id, seed), id));
    let n_train = n_scenes * 8 / 10;
    let n_val = n_scenes / 10;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    [
        ("train".to_string(), train),
        ("val".to_string(), val),
        ("test".to_string(), test),
    ]
    .into_iter()
    .collect()
}

/// Label vocabularies in canonical index order for a config.
pub fn label_vocab(config: &SceneConfig) -> LabelVocab {
    LabelVocab {
        actions: (0..config.n_actions).map(action_name).collect(),
        objects: (0..config.n_object_classes).map(object_class_name).collect(),
        relations: PREDICATES[..config.n_relation_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

/// Renders `n_scenes` scenes into `out_dir` and writes the manifest.
///
/// Layout: `images/{id}.png`, `focused/{id}_{rel_idx}.png`,
/// `annotations/{id}.json`, `manifest.json`. Re-running with identical
/// inputs reproduces identical bytes.
pub fn render_dataset(
    config: &SceneConfig,
    n_scenes: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if n_scenes == 0 {
        return Err(DataError::InvalidParameter("n_scenes must be >= 1".into()));
    }
    for sub in ["images", "focused", "annotations"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    }

    let mut checksums = BTreeMap::new();
    for id in 0..n_scenes {
        let record = generate_scene(config, scene_seed(config.seed, id as u64))?;

        let image_rel = format!("images/{id}.png");
        let png = encode_png(&record.image)?;
        checksums.insert(image_rel.clone(), sha256_hex(&png));
        write_file(&out_dir.join(&image_rel), &png)?;

        let mut relations = Vec::with_capacity(record.relations.len());
        for (rel_idx, rel) in record.relations.iter().enumerate() {
            let focused_rel = format!("focused/{id}_{rel_idx}.png");
            let png = encode_png(&rel.focused_region)?;
            checksums.insert(focused_rel.clone(), sha256_hex(&png));
            write_file(&out_dir.join(&focused_rel), &png)?;
            relations.push(RelationFile {
                triplet: triplet_to_array(&rel.triplet),
                object_indices: [rel.object_indices.0, rel.object_indices.1],
                centers: [
                    [rel.centers.0 .0, rel.centers.0 .1],
                    [rel.centers.1 .0, rel.centers.1 .1],
                ],
                negatives: rel.negatives.iter().map(triplet_to_array).collect(),
            });
        }

        let annotation = AnnotationFile {
            id,
            action: record.action.clone(),
            objects: record.objects.clone(),
            relations,
        };
        let ann_rel = format!("annotations/{id}.json");
        let ann_path = out_dir.join(&ann_rel);
        let json = serde_json::to_string_pretty(&annotation)
            .map_err(|e| DataError::Serde { path: ann_path.clone(), source: e })?
            + "\n";
        checksums.insert(ann_rel.clone(), sha256_hex(json.as_bytes()));
        write_file(&ann_path, json.as_bytes())?;
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        n_scenes,
        splits: assign_splits(n_scenes, config.seed),
        vocab: label_vocab(config),
        checksums,
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Serde { path: manifest_path.clone(), source: e })?
        + "\n";
    write_file(&manifest_path, json.as_bytes())?;
    Ok(manifest)
}

/// Loads the manifest of a rendered dataset directory.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Serde { path, source: e })
}

/// Loads one scene record, rebuilding pixel grids from the PNG files.
pub fn load_scene(dir: &Path, id: usize) -> Result<SceneRecord> {
    let ann_path = dir.join(format!("annotations/{id}.json"));
    let text = std::fs::read_to_string(&ann_path).map_err(|e| DataError::io(&ann_path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| DataError::Serde { path: ann_path.clone(), source: e })?;
    if ann.id != id {
        return Err(DataError::Corrupt {
            path: ann_path,
            reason: format!("annotation id {} does not match file id {id}", ann.id),
        });
    }
    let image = load_png(&dir.join(format!("images/{id}.png")))?;
    let mut relations = Vec::with_capacity(ann.relations.len());
    for (rel_idx, rel) in ann.relations.iter().enumerate() {
        let focused = load_png(&dir.join(format!("focused/{id}_{rel_idx}.png")))?;
        relations.push(RelationAnnotation {
            triplet: array_to_triplet(&rel.triplet),
            object_indices: (rel.object_indices[0], rel.object_indices[1]),
            centers: (
                (rel.centers[0][0], rel.centers[0][1]),
                (rel.centers[1][0], rel.centers[1][1]),
            ),
            focused_region: focused,
            negatives: rel.negatives.iter().map(array_to_triplet).collect(),
        });
    }
    Ok(SceneRecord { image, action: ann.action, objects: ann.objects, relations })
}

/// Loads every scene of a split in id order.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<(usize, SceneRecord)>> {
    manifest
        .split_ids(split)
        .iter()
        .map(|&id| load_scene(dir, id).map(|r| (id, r)))
        .collect()
}

/// Verifies every checksummed file on disk against the manifest.
pub fn verify_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    for (rel_path, expected) in &manifest.checksums {
        let path = dir.join(rel_path);
        let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != *expected {
            return Err(DataError::Corrupt {
                path,
                reason: format!("checksum {actual} does not match manifest {expected}"),
            });
        }
    }
    Ok(())
}

/// Convenience wrapper: BoundingBox of the union of two objects.
pub fn union_bbox(record: &SceneRecord, rel_idx: usize) -> Option<BoundingBox> {
    let rel = record.relations.get(rel_idx)?;
    let (i, j) = rel.object_indices;
    Some(record.objects[i].bbox.union_box(&record.objects[j].bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_exact_and_disjoint() {
        let splits = assign_splits(10, 42);
        assert_eq!(splits["train"].len(), 8);
        assert_eq!(splits["val"].len(), 1);
        assert_eq!(splits["test"].len(), 1);
        let mut all: Vec<usize> = splits.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn splits_depend_on_seed_but_not_on_rerun() {
        assert_eq!(assign_splits(100, 7), assign_splits(100, 7));
        assert_ne!(assign_splits(100, 7), assign_splits(100, 8));
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let mut grid = Array3::zeros((7, 5, 3));
        for (i, v) in grid.iter_mut().enumerate() {
            *v = ((i % 256) as f64) / 255.0;
        }
        let bytes = encode_png(&grid).unwrap();
        let tmp = std::env::temp_dir().join(format!("swtest-png-{}.png", std::process::id()));
        std::fs::write(&tmp, &bytes).unwrap();
        let back = load_png(&tmp).unwrap();
        std::fs::remove_file(&tmp).ok();
        assert_eq!(grid, back);
    }
}
