//! Dense matrices, temperature softmax and guarded logarithms.
//!
//! Everything downstream works on small row-major `f64` matrices: rows are
//! tokens, columns are vocabulary dimensions (or tokens again, for the
//! sequence-level cost and plan).

use std::ops::{Deref, Index, IndexMut};

use crate::error::{Error, Result};

/// Floor applied inside every logarithm of a probability.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

/// Tolerance on row sums accepted by [`ProbMatrix::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; rejects ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::input(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // cols may be zero, so no chunks_exact
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r.iter().sum()).collect()
    }

    /// Column sums, accumulated top to bottom.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// New matrix whose column `i` is column `columns[i]` of `self`.
    pub fn select_columns(&self, columns: &[usize]) -> Self {
        Self::from_fn(self.rows, columns.len(), |r, c| self[(r, columns[c])])
    }

    /// First `n` rows.
    pub fn head_rows(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::input(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Raw model outputs, one row per token. At least one token and two
/// vocabulary dimensions; every entry finite.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix(Matrix);

impl LogitMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() < 1 {
            return Err(Error::input("logit matrix needs at least one token"));
        }
        if m.cols() < 2 {
            return Err(Error::input(format!(
                "logit matrix needs a vocabulary of at least 2, got {}",
                m.cols()
            )));
        }
        if let Some(pos) = m.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite logit at token {}, dimension {}",
                pos / m.cols(),
                pos % m.cols()
            )));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn head_rows(&self, n: usize) -> Self {
        Self(self.0.head_rows(n.max(1)))
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl Deref for LogitMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Row-stochastic matrix: entries in `[0, 1]`, each row summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::input("probability matrix must be non-empty"));
        }
        for (r, row) in m.iter_rows().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::input(format!(
                    "probability {v} outside [0, 1] in row {r}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::input(format!("row {r} sums to {sum}, expected 1")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Column permutation keeps every row stochastic.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        debug_assert_eq!(perm.len(), self.cols());
        Self(self.0.select_columns(perm))
    }

    pub fn head_rows(&self, n: usize) -> Self {
        Self(self.0.head_rows(n.max(1)))
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl Deref for ProbMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::config(format!(
                "temperature must be positive, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Row-wise `softmax(z / tau)` with max subtraction.
pub fn softmax_rows(logits: &LogitMatrix, temperature: Temperature) -> ProbMatrix {
    let tau = temperature.value();
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (r, row) in logits.iter_rows().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(r);
        let mut total = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = ((z - max) / tau).exp();
            total += *d;
        }
        // total >= 1 because the max entry contributes exp(0)
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    ProbMatrix(out)
}

/// `ln(max(p, floor))` for a probability `p`.
pub fn safe_log(p: f64, floor: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::input(format!("probability {p} outside [0, 1]")));
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::config(format!(
            "log floor must lie in (0, 1), got {floor}"
        )));
    }
    Ok(p.max(floor).ln())
}

/// Backpropagates `grad` (w.r.t. the probabilities) through
/// `probs = softmax(z / tau)`, returning the gradient w.r.t. `z`.
pub fn softmax_backward(probs: &Matrix, grad: &Matrix, temperature: Temperature) -> Matrix {
    debug_assert_eq!(probs.shape(), grad.shape());
    let tau = temperature.value();
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - inner) / tau;
        }
    }
    out
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
