//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A `Tape` records operations as they execute; `backward` replays them in
//! reverse, accumulating gradients into leaf nodes. Vectors are modeled as
//! 1 x d matrices so every value is an `Array2<f64>`. Gradients are only
//! materialized for nodes on a path to a gradient-requiring leaf, which is
//! how frozen inputs (teacher embeddings, constant masks) are guaranteed to
//! receive no gradient at all.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a 1 x d row to every row.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// a . b^T without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Fused per-row layer norm with gain and bias rows; caches (x_hat, inv_std).
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Mean of the leading diagonal; defined for cols >= rows.
    DiagMean(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// Select rows of a matrix by index, duplicates allowed.
    GatherRows(NodeId, Vec<usize>),
    /// Multiply a matrix elementwise by a 1 x 1 scalar node.
    MulScalar(NodeId, NodeId),
    /// Patch-neighborhood unfold for 3 x 3 style convolutions on a
    /// row-per-position token grid; None neighbors read as zero.
    UnfoldRows(NodeId, Vec<Vec<Option<usize>>>),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// A recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers an input. `needs_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Registers a constant input that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated in a node, if any was propagated to it.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// True when backward can deposit a gradient in this node.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.ng(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Adds a 1 x d row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        let r = &self.nodes[row.0].value;
        for mut out_row in v.rows_mut() {
            out_row += &r.row(0);
        }
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// a . b^T, used by attention scores and similarity matrices.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    /// Adds a constant matrix (no gradient path through the constant).
    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        let g = self.ng(a);
        self.push(v, Op::AddConst(a), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let g = self.ng(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    /// Row-wise layer norm with learnable gain and bias (both 1 x d).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.dim();
        let mut x_hat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                x_hat[[i, j]] = (v - mean) * is;
            }
        }
        let gm = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                out[[i, j]] = x_hat[[i, j]] * gm[[0, j]] + bt[[0, j]];
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, x_hat, inv_std }, g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut v = av.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let g = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut v = av.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - log_sum);
        }
        let g = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), g)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut v = av.clone();
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
            row.mapv_inplace(|x| x / norm);
        }
        let g = self.ng(a);
        self.push(v, Op::L2NormalizeRows(a), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), av.sum() / av.len() as f64);
        let g = self.ng(a);
        self.push(v, Op::MeanAll(a), g)
    }

    /// Mean of entries (i, i); valid when cols >= rows.
    pub fn diag_mean(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (n, c) = av.dim();
        assert!(c >= n, "diag_mean needs cols >= rows, got {n} x {c}");
        let sum: f64 = (0..n).map(|i| av[[i, i]]).sum();
        let v = Array2::from_elem((1, 1), sum / n as f64);
        let g = self.ng(a);
        self.push(v, Op::DiagMean(a), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let v = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a, r0, r1), g)
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let v = self.nodes[a.0].value.slice(s![.., c0..c1]).to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceCols(a, c0, c1), g)
    }

    /// Rows of `a` selected by `indices`, duplicates allowed.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let av = &self.nodes[a.0].value;
        let d = av.ncols();
        let mut v = Array2::zeros((indices.len(), d));
        for (i, &idx) in indices.iter().enumerate() {
            v.row_mut(i).assign(&av.row(idx));
        }
        let g = self.ng(a);
        self.push(v, Op::GatherRows(a, indices.to_vec()), g)
    }

    /// Elementwise product with a 1 x 1 scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        let sv = self.nodes[scalar.0].value[[0, 0]];
        let v = self.nodes[a.0].value.mapv(|x| x * sv);
        let g = self.ng(a) || self.ng(scalar);
        self.push(v, Op::MulScalar(a, scalar), g)
    }

    /// Concatenates neighbor rows per position; None slots contribute zeros.
    /// Output row r is the horizontal stack of `neighbors[r]` source rows.
    pub fn unfold_rows(&mut self, a: NodeId, neighbors: &[Vec<Option<usize>>]) -> NodeId {
        let av = &self.nodes[a.0].value;
        let d = av.ncols();
        let k = neighbors.first().map(Vec::len).unwrap_or(0);
        let mut v = Array2::zeros((neighbors.len(), k * d));
        for (r, neigh) in neighbors.iter().enumerate() {
            for (slot, src) in neigh.iter().enumerate() {
                if let Some(sr) = src {
                    for j in 0..d {
                        v[[r, slot * d + j]] = av[[*sr, j]];
                    }
                }
            }
        }
        let g = self.ng(a);
        self.push(v, Op::UnfoldRows(a, neighbors.to_vec()), g)
    }

    fn accumulate(&mut self, id: NodeId, delta: &Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += delta,
            None => self.nodes[id.0].grad = Some(delta.clone()),
        }
    }

    /// Runs reverse accumulation from `(node, seed)` pairs.
    ///
    /// Seeds must match their node's value shape. Multiple calls keep
    /// accumulating; clear by dropping the tape.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Array2<f64>)]) {
        for (id, seed) in seeds {
            assert_eq!(
                self.nodes[id.0].value.dim(),
                seed.dim(),
                "seed shape mismatch for node {}",
                id.0
            );
            self.accumulate(*id, seed);
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = &grad * &self.nodes[b.0].value;
                    let db = &grad * &self.nodes[a.0].value;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(a, &grad);
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(row, &summed);
                }
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&grad);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatMulNT(a, b) => {
                    let da = grad.dot(&self.nodes[b.0].value);
                    let db = grad.t().dot(&self.nodes[a.0].value);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, &grad.mapv(|x| x * c));
                }
                Op::AddConst(a) => {
                    self.accumulate(a, &grad);
                }
                Op::Exp(a) => {
                    let da = &grad * &self.nodes[idx].value;
                    self.accumulate(a, &da);
                }
                Op::Gelu(a) => {
                    let da = &grad * &self.nodes[a.0].value.mapv(gelu_grad_scalar);
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, &(&grad * &mask));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &grad * &(y * &y.mapv(|v| 1.0 - v));
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, x_hat, inv_std } => {
                    let (n, d) = grad.dim();
                    let gm = self.nodes[gamma.0].value.clone();
                    let mut dgamma = Array2::zeros((1, d));
                    let mut dbeta = Array2::zeros((1, d));
                    let mut dx = Array2::zeros((n, d));
                    for i in 0..n {
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..d {
                            let h = grad[[i, j]] * gm[[0, j]];
                            h_mean += h;
                            hx_mean += h * x_hat[[i, j]];
                            dgamma[[0, j]] += grad[[i, j]] * x_hat[[i, j]];
                            dbeta[[0, j]] += grad[[i, j]];
                        }
                        h_mean /= d as f64;
                        hx_mean /= d as f64;
                        for j in 0..d {
                            let h = grad[[i, j]] * gm[[0, j]];
                            dx[[i, j]] = (h - h_mean - x_hat[[i, j]] * hx_mean) * inv_std[i];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::SoftmaxRows(a) => {
                    let sm = &self.nodes[idx].value;
                    let mut da = Array2::zeros(grad.dim());
                    for i in 0..grad.nrows() {
                        let dot: f64 = (0..grad.ncols())
                            .map(|j| grad[[i, j]] * sm[[i, j]])
                            .sum();
                        for j in 0..grad.ncols() {
                            da[[i, j]] = sm[[i, j]] * (grad[[i, j]] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = self.nodes[idx].value.mapv(f64::exp);
                    let mut da = grad.clone();
                    for i in 0..grad.nrows() {
                        let row_sum: f64 = (0..grad.ncols()).map(|j| grad[[i, j]]).sum();
                        for j in 0..grad.ncols() {
                            da[[i, j]] -= sm[[i, j]] * row_sum;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::L2NormalizeRows(a) => {
                    let xv = &self.nodes[a.0].value;
                    let mut da = Array2::zeros(grad.dim());
                    for i in 0..grad.nrows() {
                        let norm = xv
                            .row(i)
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt()
                            .max(1e-30);
                        let dot: f64 = (0..grad.ncols())
                            .map(|j| grad[[i, j]] * xv[[i, j]])
                            .sum();
                        for j in 0..grad.ncols() {
                            da[[i, j]] =
                                grad[[i, j]] / norm - xv[[i, j]] * dot / (norm * norm * norm);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let g0 = grad[[0, 0]];
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), g0);
                    self.accumulate(a, &da);
                }
                Op::MeanAll(a) => {
                    let len = self.nodes[a.0].value.len() as f64;
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), grad[[0, 0]] / len);
                    self.accumulate(a, &da);
                }
                Op::DiagMean(a) => {
                    let (n, _) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    let g0 = grad[[0, 0]] / n as f64;
                    for i in 0..n {
                        da[[i, i]] = g0;
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let slice = grad.slice(s![offset..offset + rows, ..]).to_owned();
                        self.accumulate(p, &slice);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        let slice = grad.slice(s![.., offset..offset + cols]).to_owned();
                        self.accumulate(p, &slice);
                        offset += cols;
                    }
                }
                Op::SliceRows(a, r0, _r1) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(s![r0..r0 + grad.nrows(), ..]).assign(&grad);
                    self.accumulate(a, &da);
                }
                Op::SliceCols(a, c0, _c1) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(s![.., c0..c0 + grad.ncols()]).assign(&grad);
                    self.accumulate(a, &da);
                }
                Op::GatherRows(a, indices) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    for (i, idx) in indices.iter().enumerate() {
                        let mut row = da.row_mut(*idx);
                        row += &grad.row(i);
                    }
                    self.accumulate(a, &da);
                }
                Op::MulScalar(a, scalar) => {
                    let sv = self.nodes[scalar.0].value[[0, 0]];
                    let da = grad.mapv(|x| x * sv);
                    self.accumulate(a, &da);
                    let ds = (&grad * &self.nodes[a.0].value).sum();
                    self.accumulate(scalar, &Array2::from_elem((1, 1), ds));
                }
                Op::UnfoldRows(a, neighbors) => {
                    let d = self.nodes[a.0].value.ncols();
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    for (r, neigh) in neighbors.iter().enumerate() {
                        for (slot, src) in neigh.iter().enumerate() {
                            if let Some(sr) = src {
                                for j in 0..d {
                                    da[[*sr, j]] += grad[[r, slot * d + j]];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
        }
    }

    /// Backward from a single scalar output with seed 1.
    pub fn backward(&mut self, output: NodeId) {
        assert_eq!(
            self.nodes[output.0].value.dim(),
            (1, 1),
            "backward() expects a scalar output, use backward_seeded otherwise"
        );
        self.backward_seeded(&[(output, Array2::from_elem((1, 1), 1.0))]);
    }
}
