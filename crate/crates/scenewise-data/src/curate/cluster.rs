//! Density-based label grouping over the mutual-reachability graph.
//!
//! This is a simplified flat extraction in the HDBSCAN family: cosine
//! distances are lifted to mutual reachability, a minimum spanning tree is
//! built, and the tree is cut at the largest weight gap. Components that meet
//! the minimum size become groups; the rest is noise.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use super::embedder::{cosine_distance, TextEmbedder};
use crate::error::{DataError, Result};
use crate::types::Triplet;

/// Configuration for density-based label grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Neighbor count used for core distances.
    pub k: usize,
    /// Smallest component size that still counts as a group.
    pub min_cluster_size: usize,
    /// Distance metric; only "cosine" is supported.
    pub metric: String,
    /// Name of the pluggable text embedder.
    pub embedder: String,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 2,
            min_cluster_size: 2,
            metric: "cosine".into(),
            embedder: "ngram-64".into(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(DataError::InvalidParameter("cluster k must be >= 1".into()));
        }
        if self.min_cluster_size < 2 {
            return Err(DataError::InvalidParameter(
                "min_cluster_size must be >= 2".into(),
            ));
        }
        if self.metric != "cosine" {
            return Err(DataError::InvalidParameter(format!(
                "unsupported metric {:?}, only cosine",
                self.metric
            )));
        }
        Ok(())
    }
}

/// Grouping result: every raw label lands in exactly one group or in noise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabularyState {
    pub raw_labels: Vec<String>,
    pub color_list: BTreeSet<String>,
    pub group_assignments: BTreeMap<String, usize>,
    pub group_names: BTreeMap<usize, String>,
    pub noise_labels: BTreeSet<String>,
}

impl VocabularyState {
    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        for label in &self.raw_labels {
            let grouped = self.group_assignments.contains_key(label);
            let noise = self.noise_labels.contains(label);
            if grouped == noise {
                return Err(DataError::InvalidParameter(format!(
                    "label {label:?} must be in exactly one of groups or noise"
                )));
            }
        }
        let used: BTreeSet<usize> = self.group_assignments.values().copied().collect();
        let named: BTreeSet<usize> = self.group_names.keys().copied().collect();
        if used != named {
            return Err(DataError::InvalidParameter(
                "group_names keys differ from group ids in use".into(),
            ));
        }
        Ok(())
    }

    /// Label -> canonical group name, identity for noise labels.
    pub fn canonical_map(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for label in &self.raw_labels {
            let canonical = self
                .group_assignments
                .get(label)
                .and_then(|gid| self.group_names.get(gid))
                .cloned()
                .unwrap_or_else(|| label.clone());
            out.insert(label.clone(), canonical);
        }
        out
    }

    /// Rewrites a triplet's objects through the group mapping.
    pub fn map_triplet_objects(&self, triplet: &Triplet) -> Triplet {
        let map = |s: &String| {
            self.group_assignments
                .get(s)
                .and_then(|gid| self.group_names.get(gid))
                .cloned()
                .unwrap_or_else(|| s.clone())
        };
        (map(&triplet.0), triplet.1.clone(), map(&triplet.2))
    }
}

/// Core distance of point `p`: cosine distance to its k-th nearest neighbor,
/// not counting `p` itself.
pub fn core_distance(p: usize, k: usize, points: &[Vec<f64>]) -> Result<f64> {
    if points.len() <= k {
        return Err(DataError::InvalidParameter(format!(
            "need more than k = {k} points, got {}",
            points.len()
        )));
    }
    let mut dists: Vec<f64> = (0..points.len())
        .filter(|&q| q != p)
        .map(|q| cosine_distance(&points[p], &points[q]))
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(dists[k - 1])
}

/// Mutual reachability distance between points `a` and `b`:
/// max of the two core distances and the raw cosine distance.
pub fn mutual_reachability(a: usize, b: usize, k: usize, points: &[Vec<f64>]) -> Result<f64> {
    let core_a = core_distance(a, k, points)?;
    let core_b = core_distance(b, k, points)?;
    let d = cosine_distance(&points[a], &points[b]);
    Ok(core_a.max(core_b).max(d))
}

/// Prim minimum spanning tree over a dense weight matrix.
/// Ties resolve toward the smallest vertex index.
fn prim_mst(weights: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let n = weights.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    in_tree[0] = true;
    for j in 1..n {
        best[j] = weights[0][j];
        parent[j] = 0;
    }
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut pick = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (pick == usize::MAX || best[j] < best[pick]) {
                pick = j;
            }
        }
        edges.push((parent[pick], pick, best[pick]));
        in_tree[pick] = true;
        for j in 0..n {
            if !in_tree[j] && weights[pick][j] < best[j] {
                best[j] = weights[pick][j];
                parent[j] = pick;
            }
        }
    }
    edges
}

/// Connected components after removing MST edges heavier than `threshold`.
fn components(n: usize, edges: &[(usize, usize, f64)], threshold: f64) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b, w) in edges {
        if w <= threshold {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Cut threshold from the largest gap in the descending edge-weight sequence.
///
/// Zero-weight edges join exact duplicates and can never be split, so they do
/// not participate in gap selection; otherwise a block of duplicates would
/// always win the gap and shatter every real cluster. Returns None when no
/// informative gap exists, meaning nothing should be cut.
fn gap_threshold(edges: &[(usize, usize, f64)]) -> Option<f64> {
    let mut weights: Vec<f64> = edges.iter().map(|e| e.2).filter(|w| *w > 1e-12).collect();
    if weights.len() < 2 {
        return None;
    }
    weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best_gap = 0.0;
    let mut best_mid = None;
    for pair in weights.windows(2) {
        let gap = pair[0] - pair[1];
        if gap > best_gap {
            best_gap = gap;
            best_mid = Some((pair[0] + pair[1]) / 2.0);
        }
    }
    best_mid
}

/// Groups labels by density over mutual reachability.
///
/// Duplicated labels are legal and always land in the same group because
/// their distance is zero. Each group is named after its most frequent
/// member, ties broken lexicographically.
pub fn cluster_objects(
    labels: &[String],
    config: &ClusterConfig,
    embedder: &dyn TextEmbedder,
) -> Result<VocabularyState> {
    config.validate()?;
    if labels.len() < config.min_cluster_size {
        return Err(DataError::InvalidParameter(format!(
            "need at least min_cluster_size = {} labels, got {}",
            config.min_cluster_size,
            labels.len()
        )));
    }
    let points: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| embedder.embed(l))
        .collect::<Result<_>>()?;
    let n = points.len();
    let k = config.k.min(n - 1);

    let mut weights = vec![vec![0.0f64; n]; n];
    for a in 0..n {
        for b in (a + 1)..n {
            let w = mutual_reachability(a, b, k, &points)?;
            weights[a][b] = w;
            weights[b][a] = w;
        }
    }
    let edges = prim_mst(&weights);
    let threshold = gap_threshold(&edges).unwrap_or(f64::INFINITY);
    let comps = components(n, &edges, threshold);

    let mut state = VocabularyState {
        raw_labels: labels.to_vec(),
        ..VocabularyState::default()
    };
    let mut ordered: Vec<&Vec<usize>> = comps.iter().collect();
    ordered.sort_by_key(|c| c[0]);
    let mut next_gid = 0usize;
    for comp in ordered {
        if comp.len() >= config.min_cluster_size {
            let gid = next_gid;
            next_gid += 1;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in comp {
                *counts.entry(labels[i].as_str()).or_default() += 1;
            }
            let canonical = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(name, _)| name.to_string())
                .unwrap_or_default();
            state.group_names.insert(gid, canonical);
            for &i in comp {
                state.group_assignments.insert(labels[i].clone(), gid);
            }
        } else {
            for &i in comp {
                state.noise_labels.insert(labels[i].clone());
            }
        }
    }
    // A duplicated label can appear in a noise singleton and a group under
    // pathological thresholds; groups win to keep the partition consistent.
    let grouped: Vec<String> = state.group_assignments.keys().cloned().collect();
    for label in grouped {
        state.noise_labels.remove(&label);
    }
    state.validate()?;
    Ok(state)
}
