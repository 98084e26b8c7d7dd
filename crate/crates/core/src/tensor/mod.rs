//! Dense f32 arrays, a counter-based random stream and a small reverse-mode
//! tape. Only the primitives the models in this crate need are provided.

mod rng;
mod tape;

pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable row-major f32 array. Cloning is cheap (shared storage).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data: data.into() })
    }

    /// Builds a tensor whose length is known to match the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: data.into() }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn vector(values: Vec<f32>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    /// Stacks equally sized rows into a `[rows, cols]` matrix.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self::from_parts(vec![rows.len(), cols], data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading extent; 1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Row width when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f32
        }
    }

    pub fn sq_norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(vec![idx.len(), c], data)
    }

    /// Concatenates matrices with equal width along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::zeros(&[0, 0]));
        };
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::Dimension(format!("row width {} vs {c}", p.cols())));
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_parts(vec![rows, c], data))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `input · weights + bias` for `input` of shape `[in]` or `[batch, in]`,
/// `weights` of shape `[in, out]` and `bias` of shape `[out]`.
pub fn matmul_affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, inner) = match input.shape() {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        s => return Err(Error::Dimension(format!("affine input must be 1-D or 2-D, got {s:?}"))),
    };
    let [w_in, out] = weights.shape() else {
        return Err(Error::Dimension(format!("weights must be 2-D, got {:?}", weights.shape())));
    };
    if *w_in != inner {
        return Err(Error::Dimension(format!("input width {inner} vs weight rows {w_in}")));
    }
    if bias.shape() != [*out] {
        return Err(Error::Dimension(format!("bias {:?} vs output width {out}", bias.shape())));
    }
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(bias.data());
    }
    gemm(batch, inner, *out, input.data(), false, weights.data(), false, &mut y, 1.0);
    let shape = if input.shape().len() == 1 { vec![*out] } else { vec![batch, *out] };
    Ok(Tensor::from_parts(shape, y))
}

/// `c = beta_c * c + op(a) · op(b)` with `op(a)` of shape `[m, k]` and
/// `op(b)` of shape `[k, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta_c: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable from the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta_c,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
