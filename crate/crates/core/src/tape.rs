//! Minimal tape-based reverse-mode differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and produces exact gradients for every recorded
//! input. Replaying a tape reproduces the forward values bit-for-bit, and
//! gradient accumulation follows the fixed recording order, so results are
//! deterministic.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    /// Leaf. `Some(name)` marks a named parameter whose gradient is reported.
    Input(#[allow(dead_code)] Option<String>),
    /// A · B
    MatMul(NodeId, NodeId),
    /// A · Bᵀ
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product, equal shapes.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// A (r×c) plus a 1×c row broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Row i of A scaled by coeff[i]; coeff is r×1.
    RowScale(NodeId, NodeId),
    Exp(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    /// Mean over rows -> 1×c.
    MeanRows(NodeId),
    /// Sum of all entries -> 1×1.
    SumAll(NodeId),
    /// Rows of a table selected by index (duplicates allowed).
    Gather(NodeId, Vec<usize>),
    /// Stack of 1×c rows into an r×c matrix.
    Stack(Vec<NodeId>),
    /// Single row i of A -> 1×c.
    Row(NodeId, usize),
    /// Each row divided by its L2 norm.
    NormalizeRows(NodeId),
    /// log Σ exp over all entries -> 1×1.
    LogSumExp(NodeId),
    /// Binary cross-entropy of a 1×1 logit against a fixed target.
    BceLogit(NodeId, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar tape output, indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.by_node[id].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input(None))
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Register a named parameter leaf. Repeated registrations of the same
    /// name return the same node.
    pub fn param(&mut self, name: &str, value: &Array2<f64>) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Input(Some(name.to_string())));
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn row_scale(&mut self, a: NodeId, coeff: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        let c = &self.nodes[coeff].value;
        for (i, mut r) in v.axis_iter_mut(Axis(0)).enumerate() {
            r *= c[(i, 0)];
        }
        self.push(v, Op::RowScale(a, coeff))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for mut r in v.axis_iter_mut(Axis(0)) {
            let m = r.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            r.mapv_inplace(|x| (x - m).exp());
            let s = r.sum();
            r /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut r in v.axis_iter_mut(Axis(0)) {
            let n = r.len() as f64;
            let mean = r.sum() / n;
            let var = r.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let sigma = (var + LAYER_NORM_EPS).sqrt();
            r.mapv_inplace(|x| (x - mean) / sigma);
        }
        self.push(v, Op::LayerNormRows(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let v = x
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        let t = &self.nodes[table].value;
        let cols = t.ncols();
        let mut v = Array2::zeros((indices.len(), cols));
        for (j, &idx) in indices.iter().enumerate() {
            v.row_mut(j).assign(&t.row(idx));
        }
        self.push(v, Op::Gather(table, indices))
    }

    pub fn stack(&mut self, rows: Vec<NodeId>) -> NodeId {
        assert!(!rows.is_empty());
        let cols = self.nodes[rows[0]].value.ncols();
        let mut v = Array2::zeros((rows.len(), cols));
        for (i, &r) in rows.iter().enumerate() {
            debug_assert_eq!(self.nodes[r].value.nrows(), 1);
            v.row_mut(i).assign(&self.nodes[r].value.row(0));
        }
        self.push(v, Op::Stack(rows))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.nodes[a].value.row(i).to_owned().insert_axis(Axis(0));
        self.push(v, Op::Row(a, i))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for mut r in v.axis_iter_mut(Axis(0)) {
            let n = r.fold(0.0, |acc, &x| acc + x * x).sqrt();
            r /= n;
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Any row of `a` with zero L2 norm makes the cosine path undefined.
    pub fn try_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        for r in self.nodes[a].value.axis_iter(Axis(0)) {
            if r.fold(0.0, |acc, &x| acc + x * x).sqrt() <= 0.0 {
                return Err(Error::InvalidArgument("zero-norm vector in cosine similarity".into()));
            }
        }
        Ok(self.normalize_rows(a))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let m = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let s = x.fold(0.0, |acc, &v| acc + (v - m).exp());
        let v = Array2::from_elem((1, 1), m + s.ln());
        self.push(v, Op::LogSumExp(a))
    }

    pub fn bce_logit(&mut self, z: NodeId, target: f64) -> NodeId {
        let zv = self.nodes[z].value[(0, 0)];
        // softplus(z) - y z, computed stably
        let loss = zv.max(0.0) + (-zv.abs()).exp().ln_1p() - target * zv;
        let v = Array2::from_elem((1, 1), loss);
        self.push(v, Op::BceLogit(z, target))
    }

    /// Reverse pass from a scalar (1×1) root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let accum = |grads: &mut Vec<Option<Array2<f64>>>, target: NodeId, delta: Array2<f64>| {
                match &mut grads[target] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Input(_) => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(&self.nodes[*b].value);
                    let db = g.t().dot(&self.nodes[*a].value);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    accum(&mut grads, *a, &g * &self.nodes[*b].value);
                    accum(&mut grads, *b, &g * &self.nodes[*a].value);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, &g * *c),
                Op::AddRow(a, row) => {
                    accum(&mut grads, *a, g.clone());
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, *row, drow);
                }
                Op::RowScale(a, coeff) => {
                    let c = &self.nodes[*coeff].value;
                    let av = &self.nodes[*a].value;
                    let mut da = g.clone();
                    for (i, mut r) in da.axis_iter_mut(Axis(0)).enumerate() {
                        r *= c[(i, 0)];
                    }
                    let mut dc = Array2::zeros((c.nrows(), 1));
                    for i in 0..c.nrows() {
                        let mut s = 0.0;
                        for j in 0..av.ncols() {
                            s += g[(i, j)] * av[(i, j)];
                        }
                        dc[(i, 0)] = s;
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *coeff, dc);
                }
                Op::Exp(a) => accum(&mut grads, *a, &g * &self.nodes[id].value),
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| f64::from(x > 0.0));
                    accum(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let mut dot = 0.0;
                        for j in 0..y.ncols() {
                            dot += g[(i, j)] * y[(i, j)];
                        }
                        for j in 0..y.ncols() {
                            da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::LayerNormRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let mut da = Array2::zeros(x.raw_dim());
                    let n = x.ncols() as f64;
                    for i in 0..x.nrows() {
                        let mean = x.row(i).sum() / n;
                        let var = x.row(i).fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                        let sigma = (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = g.row(i).sum() / n;
                        let gy_mean = (0..x.ncols())
                            .map(|j| g[(i, j)] * y[(i, j)])
                            .sum::<f64>()
                            / n;
                        for j in 0..x.ncols() {
                            da[(i, j)] = (g[(i, j)] - g_mean - y[(i, j)] * gy_mean) / sigma;
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let r = self.nodes[*a].value.nrows() as f64;
                    let scaled = &g / r;
                    let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                    for mut row in da.axis_iter_mut(Axis(0)) {
                        row.assign(&scaled.row(0));
                    }
                    accum(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[*a].value.raw_dim(), g[(0, 0)]);
                    accum(&mut grads, *a, da);
                }
                Op::Gather(table, indices) => {
                    let mut dt = Array2::zeros(self.nodes[*table].value.raw_dim());
                    for (j, &idx) in indices.iter().enumerate() {
                        let mut r = dt.row_mut(idx);
                        r += &g.row(j);
                    }
                    accum(&mut grads, *table, dt);
                }
                Op::Stack(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        accum(&mut grads, r, g.row(i).to_owned().insert_axis(Axis(0)));
                    }
                }
                Op::Row(a, i) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                    da.row_mut(*i).assign(&g.row(0));
                    accum(&mut grads, *a, da);
                }
                Op::NormalizeRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let mut da = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let norm = x.row(i).fold(0.0, |acc, &v| acc + v * v).sqrt();
                        let gy: f64 = (0..x.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..x.ncols() {
                            da[(i, j)] = (g[(i, j)] - y[(i, j)] * gy) / norm;
                        }
                    }
                    accum(&mut grads, *a, da);
                }
                Op::LogSumExp(a) => {
                    let x = &self.nodes[*a].value;
                    let m = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                    let s = x.fold(0.0, |acc, &v| acc + (v - m).exp());
                    let da = x.mapv(|v| (v - m).exp() / s * g[(0, 0)]);
                    accum(&mut grads, *a, da);
                }
                Op::BceLogit(z, target) => {
                    let zv = self.nodes[*z].value[(0, 0)];
                    let p = 1.0 / (1.0 + (-zv).exp());
                    let dz = Array2::from_elem((1, 1), (p - target) * g[(0, 0)]);
                    accum(&mut grads, *z, dz);
                }
            }
        }
        Gradients { by_node: grads }
    }

    /// Gradients of all named parameter leaves; names absent from the map did
    /// not influence the root.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.param_ids {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.param_ids.get(name).copied()
    }
}
