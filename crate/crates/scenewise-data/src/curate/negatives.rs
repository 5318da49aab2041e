//! Negative triplet synthesis: object swaps within the scene plus predicate
//! replacement through a dictionary of opposites.

use std::collections::BTreeMap;

use super::embedder::{cosine_similarity, NgramEmbedder, TextEmbedder};
use crate::error::{DataError, Result};
use crate::types::{SceneRecord, Triplet};

/// Dictionary of opposite phrases with similarity-based key lookup.
#[derive(Debug, Clone)]
pub struct AntonymDictionary {
    entries: BTreeMap<String, String>,
    embedder: NgramEmbedder,
}

impl AntonymDictionary {
    pub fn new(entries: BTreeMap<String, String>) -> Result<Self> {
        if entries.is_empty() || entries.keys().any(|k| k.is_empty()) {
            return Err(DataError::InvalidParameter(
                "antonym dictionary needs non-empty keys".into(),
            ));
        }
        Ok(Self { entries, embedder: NgramEmbedder::default() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Opposite of the key most similar to `phrase`; total via nearest key.
    pub fn opposite(&self, phrase: &str) -> Result<&str> {
        let keys = self.keys_by_similarity(phrase)?;
        Ok(self.entries[keys[0]].as_str())
    }

    /// All keys ordered by similarity to `phrase`, descending; ties break
    /// lexicographically.
    pub fn keys_by_similarity(&self, phrase: &str) -> Result<Vec<&str>> {
        let query = self.embedder.embed(phrase)?;
        let mut scored: Vec<(&str, f64)> = Vec::with_capacity(self.entries.len());
        for key in self.entries.keys() {
            let emb = self.embedder.embed(key)?;
            scored.push((key.as_str(), cosine_similarity(&query, &emb)));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
        Ok(scored.into_iter().map(|(k, _)| k).collect())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// All (phrase, opposite) pairs in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.entries.iter()
    }
}

/// Opposites for the built-in geometric predicates. Both orientations are
/// present so every predicate has several replacement candidates.
pub fn builtin_antonyms() -> AntonymDictionary {
    let entries: BTreeMap<String, String> = [
        ("left of", "right of"),
        ("right of", "left of"),
        ("above", "below"),
        ("below", "above"),
        ("inside", "around"),
        ("touching", "apart from"),
        ("near", "far from"),
        ("far from", "near"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    AntonymDictionary::new(entries).expect("builtin dictionary is valid")
}

/// Enumerates negative candidates for one positive triplet and returns the
/// first `n` that are distinct and not true in the scene.
///
/// Swap candidates come first: each other scene object replaces object_1,
/// then object_2, skipping degenerate swaps that would equate subject and
/// object. Predicate replacements follow, one per dictionary key in
/// similarity order to the positive predicate.
pub fn enumerate_negatives(
    scene_names: &[String],
    positive: &Triplet,
    truths: &[Triplet],
    antonyms: &AntonymDictionary,
    n: usize,
) -> Result<Vec<Triplet>> {
    let (subj, pred, obj) = positive;
    let mut candidates: Vec<Triplet> = Vec::new();
    for name in scene_names {
        if name != subj && name != obj {
            candidates.push((name.clone(), pred.clone(), obj.clone()));
        }
    }
    for name in scene_names {
        if name != subj && name != obj {
            candidates.push((subj.clone(), pred.clone(), name.clone()));
        }
    }
    for key in antonyms.keys_by_similarity(pred)? {
        let opposite = antonyms.get(key).expect("key comes from the dictionary");
        candidates.push((subj.clone(), opposite.to_string(), obj.clone()));
    }

    let mut out: Vec<Triplet> = Vec::with_capacity(n);
    for cand in candidates {
        if truths.contains(&cand) || out.contains(&cand) {
            continue;
        }
        out.push(cand);
        if out.len() == n {
            return Ok(out);
        }
    }
    Err(DataError::NegativeExhausted {
        scene: format!("{subj} {pred} {obj}"),
        reason: format!("only {} of {n} requested candidates are valid", out.len()),
    })
}

/// Negative triplets for one annotated relation of a scene record.
///
/// Candidates equal to any positive triplet of the record are rejected;
/// the result holds exactly `n` distinct negatives, swap-based first.
pub fn generate_negative_triplets(
    record: &SceneRecord,
    rel_idx: usize,
    antonyms: &AntonymDictionary,
    n: usize,
) -> Result<Vec<Triplet>> {
    if record.objects.len() < 2 {
        return Err(DataError::InvalidParameter(
            "negative generation needs at least 2 objects".into(),
        ));
    }
    if n < 3 {
        return Err(DataError::InvalidParameter(format!(
            "at least 3 negatives are required, asked for {n}"
        )));
    }
    let relation = record.relations.get(rel_idx).ok_or_else(|| {
        DataError::InvalidParameter(format!(
            "relation index {rel_idx} out of range for {} relations",
            record.relations.len()
        ))
    })?;
    let names: Vec<String> = record.objects.iter().map(|o| o.name.clone()).collect();
    let positives: Vec<Triplet> = record.relations.iter().map(|r| r.triplet.clone()).collect();
    enumerate_negatives(&names, &relation.triplet, &positives, antonyms, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn t(a: &str, b: &str, c: &str) -> Triplet {
        (a.into(), b.into(), c.into())
    }

    #[test]
    fn swaps_come_first_and_antonyms_follow() {
        let scene = names(&["A", "B", "C"]);
        let positive = t("A", "left of", "B");
        let truths = vec![positive.clone()];
        let out =
            enumerate_negatives(&scene, &positive, &truths, &builtin_antonyms(), 3).unwrap();
        assert!(out.contains(&t("C", "left of", "B")));
        assert!(out.contains(&t("A", "left of", "C")));
        assert!(out.contains(&t("A", "right of", "B")));
    }

    #[test]
    fn true_swaps_are_rejected() {
        let scene = names(&["A", "B", "C"]);
        let positive = t("A", "left of", "B");
        let truths = vec![
            positive.clone(),
            t("C", "left of", "B"),
            t("A", "left of", "C"),
        ];
        let out =
            enumerate_negatives(&scene, &positive, &truths, &builtin_antonyms(), 3).unwrap();
        for neg in &out {
            assert!(!truths.contains(neg));
            assert_ne!(neg.1, "left of");
        }
    }

    #[test]
    fn two_object_scene_relies_on_antonyms() {
        let scene = names(&["A", "B"]);
        let positive = t("A", "near", "B");
        let truths = vec![positive.clone(), t("B", "near", "A")];
        let out =
            enumerate_negatives(&scene, &positive, &truths, &builtin_antonyms(), 3).unwrap();
        assert_eq!(out.len(), 3);
        for neg in &out {
            assert_eq!(neg.0, "A");
            assert_eq!(neg.2, "B");
            assert_ne!(neg.1, "near");
        }
        // The most similar key is the predicate itself, so its opposite leads.
        assert_eq!(out[0], t("A", "far from", "B"));
    }

    #[test]
    fn exhaustion_is_an_error() {
        let scene = names(&["A", "B"]);
        let positive = t("A", "near", "B");
        let antonyms = AntonymDictionary::new(
            [("near".to_string(), "far from".to_string())].into_iter().collect(),
        )
        .unwrap();
        // One antonym candidate and no usable swaps cannot reach 3.
        let err = enumerate_negatives(&scene, &positive, &[positive.clone()], &antonyms, 3);
        assert!(matches!(err, Err(DataError::NegativeExhausted { .. })));
    }

    #[test]
    fn results_are_distinct() {
        let scene = names(&["A", "B", "C", "D"]);
        let positive = t("A", "touching", "B");
        let out = enumerate_negatives(
            &scene,
            &positive,
            &[positive.clone()],
            &builtin_antonyms(),
            6,
        )
        .unwrap();
        for i in 0..out.len() {
            for j in (i + 1)..out.len() {
                assert_ne!(out[i], out[j]);
            }
        }
    }

    #[test]
    fn nearest_key_fallback_is_total() {
        let d = builtin_antonyms();
        // A phrase that is not a key still resolves to some opposite.
        let opp = d.opposite("leftward of").unwrap();
        assert!(!opp.is_empty());
        assert_eq!(d.opposite("near").unwrap(), "far from");
    }
}
