//! Dense row-major matrices and the handful of primitives the rest of the
//! crate builds on: row normalization, cosine distance matrices and a
//! temperature softmax.

use crate::error::{Error, Result};

/// Rows whose L2 norm falls below this are treated as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (head, tail) = self.data.split_at_mut(hi * self.cols);
        head[lo * self.cols..(lo + 1) * self.cols].swap_with_slice(&mut tail[..self.cols]);
    }

    pub fn fill_row(&mut self, i: usize, v: f64) {
        self.row_mut(i).fill(v);
    }

    pub fn fill_col(&mut self, j: usize, v: f64) {
        for i in 0..self.rows {
            self.data[i * self.cols + j] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of `self` selected by `indices`, in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Divides every row by its L2 norm.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows() == 0 {
        return Err(Error::EmptyInput("matrix has no rows"));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = l2_norm(row);
        if !(norm >= ZERO_NORM_EPS) {
            return Err(Error::ZeroRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Per-token output embeddings of one sequence: `tokens × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    matrix: Matrix,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps a matrix without touching its rows.
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::EmptyInput("embedding matrix needs L >= 1 and D >= 1"));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("embedding matrix"));
        }
        Ok(EmbeddingMatrix {
            matrix,
            normalized: false,
        })
    }

    /// Normalizes every row to unit length.
    pub fn normalized(matrix: Matrix) -> Result<Self> {
        let m = Self::new(matrix)?;
        Ok(EmbeddingMatrix {
            matrix: normalize_rows(&m.matrix)?,
            normalized: true,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Caller guarantees the rows are already unit-norm.
    pub(crate) fn from_unit_rows(matrix: Matrix) -> Self {
        EmbeddingMatrix {
            matrix,
            normalized: true,
        }
    }

    pub(crate) fn with_normalized_flag(matrix: Matrix, normalized: bool) -> Self {
        EmbeddingMatrix { matrix, normalized }
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.matrix.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    #[inline]
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }
}

/// `1 − cos(a_i, b_j)` for every row pair; shape `a.tokens × b.tokens`.
///
/// Rows are normalized internally, so the result does not depend on row
/// scale.
pub fn cosine_distance_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Matrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let an = unit_rows(a)?;
    let bn = unit_rows(b)?;
    let mut out = Matrix::zeros(a.tokens(), b.tokens());
    for i in 0..a.tokens() {
        let ai = an.row(i);
        for j in 0..b.tokens() {
            let cos = dot(ai, bn.row(j)).clamp(-1.0, 1.0);
            out.set(i, j, 1.0 - cos);
        }
    }
    Ok(out)
}

fn unit_rows(e: &EmbeddingMatrix) -> Result<std::borrow::Cow<'_, Matrix>> {
    if e.is_normalized() {
        Ok(std::borrow::Cow::Borrowed(e.matrix()))
    } else {
        Ok(std::borrow::Cow::Owned(normalize_rows(e.matrix())?))
    }
}

/// `softmax(scores / tau)`, stabilized by subtracting the max.
pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax over no scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) || !tau.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// `log softmax(scores / tau)` computed via log-sum-exp.
pub fn log_softmax_with_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax over no scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores
        .iter()
        .map(|s| ((s - max) / tau).exp())
        .sum::<f64>()
        .ln();
    Ok(scores.iter().map(|s| (s - max) / tau - lse).collect())
}
