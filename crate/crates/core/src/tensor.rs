//! Dense row-major tensors of 64-bit floats.
//!
//! Tensors hold parameters and public operation results. Hot loops inside
//! the layers work on raw slices through the kernels at the bottom of this
//! module; every kernel accumulates sums in ascending index order so that
//! batched and per-sample paths produce bit-identical results.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive, that the
    /// data length matches the shape and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Nested-row constructor, mostly for tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized tensor shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.rank() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| x * c).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("dot", &self.shape, &other.shape));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn l2_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Concatenates rank-1 tensors end to end.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors"));
        }
        if let Some(bad) = parts.iter().find(|t| t.rank() != 1) {
            return Err(Error::dim("concat", bad.shape(), &[]));
        }
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Tensor::vector(data)
    }

    /// Values rounded through IEEE-754 single precision, the serialization
    /// form used by checkpoints and teacher files.
    pub fn round_to_f32(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x as f32 as f64).collect(),
        }
    }
}

/// Fills a tensor with independent draws from uniform(lo, hi).
pub fn uniform_init(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!("uniform range requires lo < hi, got [{lo}, {hi})")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Euclidean norm; rejects empty input.
pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::dim("l2_norm", &[0], &[1]));
    }
    Ok(dot(v, v).sqrt())
}

// ---------------------------------------------------------------------------
// Slice kernels.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// out[j] = sum_k w[j, k] * x[k] for a row-major `out.len() x x.len()` matrix.
#[inline]
pub(crate) fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    debug_assert_eq!(w.len(), out.len() * k);
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(&w[j * k..(j + 1) * k], x);
    }
}

/// out[k] += sum_j w[j, k] * y[j].
#[inline]
pub(crate) fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let k = out.len();
    debug_assert_eq!(w.len(), y.len() * k);
    for (j, &yj) in y.iter().enumerate() {
        if yj == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[j * k..(j + 1) * k]) {
            *o += wv * yj;
        }
    }
}

/// g[j, k] += y[j] * x[k].
#[inline]
pub(crate) fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let k = x.len();
    debug_assert_eq!(g.len(), y.len() * k);
    for (j, &yj) in y.iter().enumerate() {
        if yj == 0.0 {
            continue;
        }
        for (gv, &xv) in g[j * k..(j + 1) * k].iter_mut().zip(x) {
            *gv += yj * xv;
        }
    }
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Row-blocked `out[b, j] = dot(w[j, :], x[b, :])` for a batch of inputs.
/// Four rows share each pass over a weight row, with one accumulator per
/// row summed in the same order as [`dot`], so every output is bit-identical
/// to a per-row `matvec`.
pub(crate) fn matmul_rows_nt(x: &[f64], k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    const ROWS: usize = 4;
    let batch = x.len() / k;
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), batch * n);
    let full = batch / ROWS * ROWS;
    for b in (0..full).step_by(ROWS) {
        let (x0, x1, x2, x3) = (
            &x[b * k..(b + 1) * k],
            &x[(b + 1) * k..(b + 2) * k],
            &x[(b + 2) * k..(b + 3) * k],
            &x[(b + 3) * k..(b + 4) * k],
        );
        for j in 0..n {
            let wr = &w[j * k..(j + 1) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                let wv = wr[i];
                s0 += wv * x0[i];
                s1 += wv * x1[i];
                s2 += wv * x2[i];
                s3 += wv * x3[i];
            }
            out[b * n + j] = s0;
            out[(b + 1) * n + j] = s1;
            out[(b + 2) * n + j] = s2;
            out[(b + 3) * n + j] = s3;
        }
    }
    for b in full..batch {
        let xr = &x[b * k..(b + 1) * k];
        for j in 0..n {
            out[b * n + j] = dot(&w[j * k..(j + 1) * k], xr);
        }
    }
}

/// tanh restricted to the open interval (-1, 1): far in the tails it returns
/// the largest double below 1 instead of rounding to exactly 1.
#[inline]
pub(crate) fn open_tanh(x: f64) -> f64 {
    const EDGE: f64 = 0.999_999_999_999_999_9;
    x.tanh().clamp(-EDGE, EDGE)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
