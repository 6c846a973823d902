//! Dense row-major `f64` matrices and the handful of kernels the router and
//! MoE layer need. Every kernel uses a fixed sequential reduction order so
//! results are bit-reproducible.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                detail: format!("{} values for {rows}x{cols}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch { op: "Matrix::from_rows", detail: "ragged rows".into() });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Unchecked write; callers are responsible for keeping entries finite.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `self` if every entry is finite, otherwise a `NonFinite` error
    /// tagged with `op`.
    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Row-major matrix of indices, each entry bounded by a declared domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    domain: usize,
    data: Vec<usize>,
}

impl IndexMatrix {
    pub fn from_vec(rows: usize, cols: usize, domain: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "IndexMatrix::from_vec",
                detail: format!("{} values for {rows}x{cols}", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|&&v| v >= domain) {
            return Err(Error::InvalidArgument(format!("index {bad} outside domain {domain}")));
        }
        Ok(Self { rows, cols, domain, data })
    }

    pub fn from_rows(rows: &[Vec<usize>], domain: usize) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch { op: "IndexMatrix::from_rows", detail: "ragged rows".into() });
        }
        Self::from_vec(rows.len(), cols, domain, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn domain(&self) -> usize {
        self.domain
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.data
    }
}

/// `c[i][j] = Σ_t a[i][t]·b[t][j]`, summed in ascending `t` for every element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            detail: format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let (m, p, q) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * q];
    // i-t-j loop order: each out[i][j] still accumulates in ascending t.
    for i in 0..m {
        let arow = &a.data[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b.data[t * q..(t + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Matrix { rows: m, cols: q, data: out }.check_finite("matmul")
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            detail: format!("{}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Matrix { rows: a.rows, cols: b.rows, data: out }.check_finite("matmul_nt")
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul_tn",
            detail: format!("({}x{})^T * {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let (p, q) = (a.cols, b.cols);
    let mut out = vec![0.0; p * q];
    for t in 0..a.rows {
        let arow = a.row(t);
        let brow = b.row(t);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Matrix { rows: p, cols: q, data: out }.check_finite("matmul_tn")
}

pub fn transpose(m: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(m.data.len());
    for j in 0..m.cols {
        for i in 0..m.rows {
            data.push(m.data[i * m.cols + j]);
        }
    }
    Matrix { rows: m.cols, cols: m.rows, data }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_COEFF: f64 = 0.044_715;
// √(2/π)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GeLU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

/// Analytic derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Descending-value order with lowest index first among equal values.
#[inline]
pub(crate) fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `values`, ordered by
/// `(value desc, index asc)`.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    let keys: Vec<u64> = values.iter().map(|&v| order_key(v)).collect();
    topk_keys(&keys, k, &mut Vec::new())
}

/// Unsigned key whose order matches `f64::total_cmp`.
#[inline]
pub(crate) fn order_key(v: f64) -> u64 {
    let bits = v.to_bits() as i64;
    (bits ^ (((bits >> 63) as u64) >> 1) as i64) as u64 ^ (1 << 63)
}

/// Positions of the `k` largest keys, ordered by `(key desc, index asc)`.
/// `scratch` is reused between calls.
pub(crate) fn topk_keys(keys: &[u64], k: usize, scratch: &mut Vec<u64>) -> Result<Vec<usize>> {
    if k > keys.len() {
        return Err(Error::TopKTooLarge { k, cols: keys.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    scratch.clear();
    scratch.extend_from_slice(keys);
    let (_, &mut threshold, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.cmp(a));
    let mut out = Vec::with_capacity(k);
    let mut ties = Vec::new();
    for (j, &key) in keys.iter().enumerate() {
        if key > threshold {
            out.push(j);
        } else if key == threshold {
            ties.push(j);
        }
    }
    let missing = k - out.len();
    out.extend_from_slice(&ties[..missing]);
    out.sort_unstable_by(|&a, &b| keys[b].cmp(&keys[a]).then(a.cmp(&b)));
    Ok(out)
}

/// Top-`k` under an arbitrary strict total order on positions `0..len`.
pub(crate) fn topk_indices_by(len: usize, k: usize, cmp: impl Fn(usize, usize) -> Ordering) -> Result<Vec<usize>> {
    if k > len {
        return Err(Error::TopKTooLarge { k, cols: len });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < len {
        idx.select_nth_unstable_by(k - 1, |&a, &b| cmp(a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| cmp(a, b));
    Ok(idx)
}

/// Per-row top-`k` values and column indices.
pub fn topk_rows(m: &Matrix, k: usize) -> Result<(Matrix, IndexMatrix)> {
    if k > m.cols {
        return Err(Error::TopKTooLarge { k, cols: m.cols });
    }
    let mut values = Vec::with_capacity(m.rows * k);
    let mut indices = Vec::with_capacity(m.rows * k);
    for i in 0..m.rows {
        let row = m.row(i);
        let top = topk_indices(row, k)?;
        values.extend(top.iter().map(|&j| row[j]));
        indices.extend(top);
    }
    Ok((
        Matrix { rows: m.rows, cols: k, data: values },
        IndexMatrix { rows: m.rows, cols: k, domain: m.cols, data: indices },
    ))
}
