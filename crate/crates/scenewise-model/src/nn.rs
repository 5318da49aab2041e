//! Named parameter storage, gradient accumulation, and transformer layers.
//!
//! Parameters live in a `ParamStore` keyed by dotted names (for example
//! `v_g.blk0.attn.wq`). A forward pass binds the store onto a tape, which
//! yields a `ParamBinding` mapping names to tape nodes; after backward the
//! binding harvests per-parameter gradients into a `GradStore`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{NodeId, Tape};

/// Ordered named parameter tensors. Iteration order is lexicographic by
/// name, which fixes the serialization layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; duplicate names are a programming error.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(Array2::len).sum()
    }

    /// Registers every tensor as a tape leaf. `trainable` controls whether
    /// the leaves can receive gradient (teachers bind with `false`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamBinding {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.map {
            ids.insert(name.clone(), tape.leaf(value.clone(), trainable));
        }
        ParamBinding { ids }
    }
}

/// Name-to-node map for one bound forward pass.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Harvests gradients deposited by a backward pass into `grads`.
    /// Parameters that received no gradient contribute nothing.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut GradStore) {
        for (name, id) in &self.ids {
            if let Some(g) = tape.grad(*id) {
                grads.accumulate(name, g);
            }
        }
    }
}

/// Accumulated gradients keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, delta: &Array2<f64>) {
        match self.map.get_mut(name) {
            Some(g) => *g += delta,
            None => {
                self.map.insert(name.to_string(), delta.clone());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Largest absolute entry across all gradients, for divergence checks.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// x . W + b with b broadcast across rows.
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// Multi-head self-attention over a T x d sequence (no masking; the
/// encoders are bidirectional on both modalities).
pub fn multi_head_attention(
    tape: &mut Tape,
    x: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    n_heads: usize,
) -> NodeId {
    let d = tape.value(x).ncols();
    assert!(d % n_heads == 0, "dim {d} not divisible by {n_heads} heads");
    let dh = d / n_heads;
    let q = linear(tape, x, wq, bq);
    let k = linear(tape, x, wk, bk);
    let v = linear(tape, x, wv, bv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    linear(tape, merged, wo, bo)
}

/// Pre-LN transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    x: NodeId,
    n_heads: usize,
) -> NodeId {
    let p = |suffix: &str| binding.id(&format!("{prefix}.{suffix}"));
    let ln1 = tape.layer_norm(x, p("ln1.g"), p("ln1.b"), 1e-5);
    let attn = multi_head_attention(
        tape,
        ln1,
        p("attn.wq"),
        p("attn.bq"),
        p("attn.wk"),
        p("attn.bk"),
        p("attn.wv"),
        p("attn.bv"),
        p("attn.wo"),
        p("attn.bo"),
        n_heads,
    );
    let x = tape.add(x, attn);
    let ln2 = tape.layer_norm(x, p("ln2.g"), p("ln2.b"), 1e-5);
    let h = linear(tape, ln2, p("mlp.w1"), p("mlp.b1"));
    let h = tape.gelu(h);
    let h = linear(tape, h, p("mlp.w2"), p("mlp.b2"));
    tape.add(x, h)
}
