//! Reverse-mode gradient tape.
//!
//! Values are pushed onto a [`Tape`] as leaves (differentiable inputs),
//! constants, or results of primitive operations. [`Tape::backward`] walks the
//! recorded nodes in reverse, returns the gradient of a scalar output with
//! respect to every leaf, and clears the tape.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Affine { x: usize, w: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    ScaleRows(usize, Arc<[f32]>),
    Silu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    SmoothAbs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    ConcatCols(Vec<usize>),
    BroadcastRows(usize),
    Gather(usize, Arc<[usize]>),
    CrossEntropy { logits: usize, labels: Arc<[usize]>, probs: Vec<f32> },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    generation: u64,
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to `leaf`, which must have been marked with
    /// [`Tape::leaf`] before the pass that produced these gradients.
    pub fn wrt(&self, leaf: &Var<'_>) -> Result<Tensor> {
        if leaf.generation != self.generation {
            return Err(Error::MissingLeaf);
        }
        self.by_leaf.get(&leaf.id).cloned().ok_or(Error::MissingLeaf)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Marks `value` as a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1, generation: self.generation.get() }
    }

    /// Panics when `v` was recorded before the last backward pass: its id
    /// may now name an unrelated node.
    fn node_value(&self, v: &Var<'_>) -> Tensor {
        assert!(
            v.generation == self.generation.get(),
            "variable used after its tape was consumed by backward"
        );
        self.nodes.borrow()[v.id].value.clone()
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) || v.generation != self.generation.get() {
            return Err(Error::MissingLeaf);
        }
        Ok(())
    }

    /// Backpropagates from the scalar `output` and clears the tape.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check(&output)?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let generation = self.generation.get();
        self.generation.set(generation + 1);

        let out = &nodes[output.id].value;
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);
        let mut by_leaf = HashMap::new();

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    by_leaf.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Const => {}
                Op::Affine { x, w, b } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let (inner, out) = (wv.shape()[0], wv.shape()[1]);
                    let batch = g.len() / out;
                    let mut dx = vec![0.0; batch * inner];
                    gemm(batch, out, inner, &g, false, wv.data(), true, &mut dx, 0.0);
                    accumulate(&mut grads, *x, dx);
                    let mut dw = vec![0.0; inner * out];
                    gemm(inner, batch, out, xv.data(), true, &g, false, &mut dw, 0.0);
                    accumulate(&mut grads, *w, dw);
                    let mut db = vec![0.0; out];
                    for row in g.chunks_exact(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::ScaleRows(a, coefs) => {
                    let cols = g.len() / coefs.len();
                    let mut da = g;
                    for (row, c) in da.chunks_exact_mut(cols).zip(coefs.iter()) {
                        row.iter_mut().for_each(|v| *v *= c);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    let xv = nodes[*a].value.data();
                    let da = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    let da = g.iter().zip(yv).map(|(g, &s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let yv = node.value.data();
                    let da = g.iter().zip(yv).map(|(g, &y)| g * 0.5 / y).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::SmoothAbs(a) => {
                    let xv = nodes[*a].value.data();
                    let yv = node.value.data();
                    let da = g.iter().zip(xv.iter().zip(yv)).map(|(g, (x, y))| g * x / y).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let xv = nodes[*a].value.data();
                    let da = g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f32; n]);
                }
                Op::RowSums(a) => {
                    let av = &nodes[*a].value;
                    let cols = av.cols();
                    let da = g.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::BroadcastRows(a) => {
                    let d = nodes[*a].value.len();
                    let mut da = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        for (s, v) in da.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(a, idx) => {
                    let mut da = vec![0.0; nodes[*a].value.len()];
                    for (gv, &i) in g.iter().zip(idx.iter()) {
                        da[i] += gv;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = nodes[*logits].value.cols();
                    let scale = g[0] / labels.len() as f32;
                    let mut dl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dl[r * k + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
            }
        }
        Ok(Gradients { generation, by_leaf })
    }

    /// `d output / d leaf`, consuming the tape. A leaf the output does not
    /// depend on gets a zero gradient.
    pub fn grad_wrt(&self, output: Var<'_>, leaf: Var<'_>) -> Result<Tensor> {
        self.check(&leaf)?;
        let shape = {
            let nodes = self.nodes.borrow();
            let node = &nodes[leaf.id];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::MissingLeaf);
            }
            node.value.shape().to_vec()
        };
        let grads = self.backward(output)?;
        Ok(grads.by_leaf.get(&leaf.id).cloned().unwrap_or_else(|| Tensor::zeros(&shape)))
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: usize, g: Vec<f32>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    /// # Panics
    /// When the tape has been consumed by a backward pass since this
    /// variable was recorded.
    pub fn value(&self) -> Tensor {
        self.tape.node_value(self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn same_shape(&self, other: &Var<'t>) -> Result<(Tensor, Tensor)> {
        let a = self.value();
        let b = other.value();
        a.expect_same_shape(&b)?;
        Ok((a, b))
    }

    pub fn affine(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let y = super::matmul_affine(&self.value(), &w.value(), &b.value())?;
        Ok(self.unary(y, Op::Affine { x: self.id, w: w.id, b: b.id }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other)?;
        Ok(self.unary(a.add(&b)?, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other)?;
        Ok(self.unary(a.sub(&b)?, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other)?;
        Ok(self.unary(a.zip_map(&b, |x, y| x * y)?, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f32) -> Var<'t> {
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    /// Multiplies row `i` of a matrix by `coefs[i]`.
    pub fn scale_rows(&self, coefs: &[f32]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() != coefs.len() || x.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "scale_rows: {:?} with {} coefficients",
                x.shape(),
                coefs.len()
            )));
        }
        let cols = x.cols();
        let mut data = x.to_vec();
        for (row, c) in data.chunks_exact_mut(cols).zip(coefs) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let y = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.unary(y, Op::ScaleRows(self.id, coefs.into())))
    }

    pub fn silu(&self) -> Var<'t> {
        let y = self.value().map(|x| x * sigmoid(x));
        self.unary(y, Op::Silu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(self.value().map(f32::sqrt), Op::Sqrt(self.id))
    }

    /// `sqrt(x² + eps²)`, a smooth surrogate for `|x|`.
    pub fn smooth_abs(&self, eps: f32) -> Var<'t> {
        let e2 = eps * eps;
        self.unary(self.value().map(|x| (x * x + e2).sqrt()), Op::SmoothAbs(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.value().map(|x| x * x), Op::Square(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().mean()), Op::Mean(self.id))
    }

    /// `[rows, cols] -> [rows]`.
    pub fn row_sums(&self) -> Var<'t> {
        let x = self.value();
        let sums = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.unary(Tensor::vector(sums), Op::RowSums(self.id))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Dimension("empty concat".into()))?;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        if values.iter().any(|v| v.rows() != rows || v.shape().len() != 2) {
            return Err(Error::Dimension("concat_cols needs 2-D parts with equal rows".into()));
        }
        let total: usize = values.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let y = Tensor::from_parts(vec![rows, total], data);
        Ok(first.unary(y, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Repeats a vector `n` times as the rows of a matrix.
    pub fn broadcast_rows(&self, n: usize) -> Var<'t> {
        let x = self.value();
        let mut data = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let y = Tensor::from_parts(vec![n, x.len()], data);
        self.unary(y, Op::BroadcastRows(self.id))
    }

    /// Flat gather: `out[i] = x.data[idx[i]]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Dimension(format!("gather index {bad} out of {}", x.len())));
        }
        let y = Tensor::vector(idx.iter().map(|&i| x.data()[i]).collect());
        Ok(self.unary(y, Op::Gather(self.id, idx.into())))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let k = x.cols();
        if x.rows() != labels.len() || labels.iter().any(|&l| l >= k) {
            return Err(Error::Dimension("cross_entropy labels do not match logits".into()));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = x.row(r);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - row[l];
            probs.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        let y = Tensor::scalar(loss / labels.len() as f32);
        Ok(self.unary(y, Op::CrossEntropy { logits: self.id, labels: labels.into(), probs }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value().reshape(shape)?;
        Ok(self.unary(y, Op::Reshape(self.id)))
    }
}
