use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::matrix::{matmul_into, softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Stand-in for `-inf` in masked scores: `exp` of it underflows to exactly 0.
pub const MASK_VALUE: f64 = -1.0e30;

/// Handle to a parameter held by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

/// Owns every parameter of a model, trainable or not.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, frozen: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Marks a parameter as frozen. Freezing is one-way.
    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = true;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Number of scalars in non-frozen parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Offset(Var),
    Scale(Var, f64),
    Tanh(Var),
    RowSoftmax(Var),
    TopKMask(Var, Vec<bool>),
    SelectCol(Var, usize),
    FirstRow(Var),
    MulCol(Var, Var),
    CosineRows(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Mse(Var, Matrix),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations; replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input data.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Leaf bound to a stored parameter; frozen parameters never receive gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.param(id);
        let mut value = p.value.clone();
        value.grad = None;
        let v = self.push(value, Op::Param, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v += c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowSoftmax(a), rg))
    }

    /// Masks all but the top `k` entries per row; the selection is treated as
    /// constant when differentiating.
    pub fn topk_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let value = self.value(a).topk_mask(k)?;
        let kept = value.data().iter().map(|&v| v != MASK_VALUE).collect();
        let rg = self.rg(a);
        Ok(self.push(value, Op::TopKMask(a, kept), rg))
    }

    /// Column `j` as a `(rows, 1)` matrix.
    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let m = self.value(a);
        if j >= m.cols() {
            return Err(Error::Parameter(format!(
                "column {j} out of range for {:?}",
                m.shape()
            )));
        }
        let value = m.slice_cols(j, j + 1);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectCol(a, j), rg))
    }

    pub fn first_row(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Contract("first_row of an empty matrix".into()));
        }
        let value = m.select_rows(&[0]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::FirstRow(a), rg))
    }

    /// Scales row `i` of `a` by `col[i]`; a `(1, 1)` column broadcasts to every row.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(col));
        if cm.cols() != 1 || (cm.rows() != am.rows() && cm.rows() != 1) {
            return Err(Error::Dimension {
                op: "mul_col",
                lhs: am.shape(),
                rhs: cm.shape(),
            });
        }
        let mut value = am.clone();
        let cols = am.cols();
        let broadcast = cm.rows() == 1;
        for r in 0..am.rows() {
            let s = cm.data()[if broadcast { 0 } else { r }];
            value.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    /// Cosine similarity of every row of `rows` with the single-row `key`, as `(rows, 1)`.
    pub fn cosine_rows(&mut self, rows: Var, key: Var) -> Result<Var> {
        let (e, k) = (self.value(rows), self.value(key));
        if k.rows() != 1 || k.cols() != e.cols() {
            return Err(Error::Dimension {
                op: "cosine_rows",
                lhs: e.shape(),
                rhs: k.shape(),
            });
        }
        let mut out = Vec::with_capacity(e.rows());
        for r in 0..e.rows() {
            out.push(super::matrix::cosine_slices(e.row(r), k.data())?);
        }
        let value = Matrix::from_vec(e.rows(), 1, out)?;
        let rg = self.rg(rows) || self.rg(key);
        Ok(self.push(value, Op::CosineRows(rows, key), rg))
    }

    /// Mean softmax cross-entropy of `logits` rows against class `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if labels.len() != m.rows() || m.rows() == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: m.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m.cols()) {
            return Err(Error::Parameter(format!("label {bad} >= {}", m.cols())));
        }
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let value = Matrix::row_vector(vec![total / labels.len() as f64]);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy(logits, labels.to_vec()), rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Matrix) -> Result<Var> {
        let m = self.value(a);
        if m.shape() != target.shape() || m.is_empty() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: m.shape(),
                rhs: target.shape(),
            });
        }
        let n = m.len() as f64;
        let s: f64 = m
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Matrix::row_vector(vec![s / n]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mse(a, target.clone()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let value = Matrix::row_vector(vec![m.sum() / m.len() as f64]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Reverse sweep from a scalar `loss`. Every non-frozen parameter of `store`
    /// ends up with a gradient buffer: `dloss/dparam` when reachable, zeros otherwise.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for p in store.params_mut() {
            if !p.frozen {
                p.value.grad = Some(vec![0.0; p.value.len()]);
            } else {
                p.value.grad = None;
            }
        }
        for (id, var) in &self.param_vars {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            let p = &mut store.params_mut()[id.0];
            if p.frozen {
                continue;
            }
            if let Some(g) = &grads[var.0] {
                p.value.grad = Some(g.clone());
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let gm = Matrix::from_vec(out.rows(), out.cols(), g.to_vec()).expect("shape");
                if self.rg(*a) {
                    let mut da = vec![0.0; am.len()];
                    matmul_into(&gm, &bm.transpose(), &mut da);
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bm.len()];
                    matmul_into(&am.transpose(), &gm, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Offset(a) => accumulate(grads, *a, g),
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::RowSoftmax(a) => {
                let c = out.cols();
                let mut d = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::TopKMask(a, kept) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(kept)
                    .map(|(gv, &k)| if k { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::SelectCol(a, j) => {
                let am = self.value(*a);
                let mut d = vec![0.0; am.len()];
                for r in 0..am.rows() {
                    d[r * am.cols() + j] = g[r];
                }
                accumulate(grads, *a, &d);
            }
            Op::FirstRow(a) => {
                let am = self.value(*a);
                let mut d = vec![0.0; am.len()];
                d[..am.cols()].copy_from_slice(g);
                accumulate(grads, *a, &d);
            }
            Op::MulCol(a, col) => {
                let (am, cm) = (self.value(*a), self.value(*col));
                let cols = am.cols();
                let broadcast = cm.rows() == 1;
                if self.rg(*a) {
                    let mut d = g.to_vec();
                    for r in 0..am.rows() {
                        let s = cm.data()[if broadcast { 0 } else { r }];
                        d[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *a, &d);
                }
                if self.rg(*col) {
                    let mut d = vec![0.0; cm.len()];
                    for r in 0..am.rows() {
                        let dot: f64 = am
                            .row(r)
                            .iter()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .map(|(x, y)| x * y)
                            .sum();
                        d[if broadcast { 0 } else { r }] += dot;
                    }
                    accumulate(grads, *col, &d);
                }
            }
            Op::CosineRows(rows, key) => {
                let (e, k) = (self.value(*rows), self.value(*key));
                let kn = k.norm();
                let cols = e.cols();
                let mut de = vec![0.0; e.len()];
                let mut dk = vec![0.0; k.len()];
                for r in 0..e.rows() {
                    let er = e.row(r);
                    let en = er.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = out.data()[r];
                    let gr = g[r];
                    for j in 0..cols {
                        de[r * cols + j] += gr * (k.data()[j] / (en * kn) - c * er[j] / (en * en));
                        dk[j] += gr * (er[j] / (en * kn) - c * k.data()[j] / (kn * kn));
                    }
                }
                if self.rg(*rows) {
                    accumulate(grads, *rows, &de);
                }
                if self.rg(*key) {
                    accumulate(grads, *key, &dk);
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let m = self.value(*logits);
                let c = m.cols();
                let scale = g[0] / labels.len() as f64;
                let mut d = m.data().to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    let row = &mut d[r * c..(r + 1) * c];
                    softmax_in_place(row);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, &d);
            }
            Op::Mse(a, target) => {
                let m = self.value(*a);
                let n = m.len() as f64;
                let d: Vec<f64> = m
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(x, t)| 2.0 * (x - t) / n * g[0])
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}
