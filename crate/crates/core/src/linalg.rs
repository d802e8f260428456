//! Small dense linear algebra: row-major matrices, jittered Cholesky,
//! triangular solves and log-determinants.
//!
//! Sizes here are modest (M ≤ 200 inducing points, N ≤ 5000 rows), so
//! everything is plain `f64` loops laid out so the inner loop runs over a
//! contiguous row and autovectorizes.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite after {tries} jitter attempts (last jitter {last_jitter:e})")]
    NotPositiveDefinite { tries: usize, last_jitter: f64 },
    #[error("triangular factor has a zero diagonal entry at index {index}")]
    SingularFactor { index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| too large")]
    NotSymmetric { row: usize, col: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = 1.0;
        }
        out
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut out = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            out[(i, i)] = v;
        }
        out
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out.row_mut(i));
            }
        }
        Ok(out)
    }

    /// `self * self^T`.
    pub fn gram_outer(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Escalation ladder for diagonal jitter. Zero jitter is always tried first;
/// after that the jitter starts at `initial * mean(diag(A))` and grows by
/// `growth` for up to `max_tries` further attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial: f64,
    pub growth: f64,
    pub max_tries: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { initial: 1e-6, growth: 10.0, max_tries: 6 }
    }
}

/// A pivot `d` is accepted only if `d > PIVOT_RTOL * max(diag(A))`. Without
/// this a numerically rank-deficient matrix "factorizes" with 1e-16 pivots
/// whose solves are garbage.
const PIVOT_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: DenseMatrix,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Wraps an existing lower-triangular factor. Fails on a zero or
    /// negative diagonal entry.
    pub fn from_lower(l: DenseMatrix) -> Result<Self, LinalgError> {
        if !l.is_square() {
            return Err(LinalgError::NotSquare { rows: l.rows, cols: l.cols });
        }
        for i in 0..l.rows {
            if !(l[(i, i)] > 0.0) {
                return Err(LinalgError::SingularFactor { index: i });
            }
        }
        Ok(Self { l, jitter_used: 0.0 })
    }

    /// `L L^T`, i.e. the (jittered) matrix that was factorized.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.l.gram_outer()
    }
}

/// Factorizes a symmetric matrix, escalating diagonal jitter until it succeeds.
pub fn cholesky(a: &DenseMatrix, policy: JitterPolicy) -> Result<CholeskyFactor, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            if (x - y).abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
                return Err(LinalgError::NotSymmetric { row: i, col: j });
            }
        }
    }
    if let Some(l) = try_cholesky(a, 0.0, scale) {
        return Ok(CholeskyFactor { l, jitter_used: 0.0 });
    }
    let mean_diag = if n == 0 { 0.0 } else { a.diag().iter().sum::<f64>() / n as f64 };
    let mut jitter = policy.initial * mean_diag.abs().max(f64::MIN_POSITIVE);
    for _ in 0..policy.max_tries {
        if let Some(l) = try_cholesky(a, jitter, scale + jitter) {
            return Ok(CholeskyFactor { l, jitter_used: jitter });
        }
        jitter *= policy.growth;
    }
    Err(LinalgError::NotPositiveDefinite { tries: policy.max_tries + 1, last_jitter: jitter / policy.growth })
}

fn try_cholesky(a: &DenseMatrix, jitter: f64, scale: f64) -> Option<DenseMatrix> {
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    let floor = PIVOT_RTOL * scale;
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] + jitter - s;
                if !(d > floor) || !d.is_finite() {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B`, or `L^T X = B` when `transpose` is set.
pub fn tri_solve(l: &DenseMatrix, b: &DenseMatrix, transpose: bool) -> Result<DenseMatrix, LinalgError> {
    if !l.is_square() {
        return Err(LinalgError::NotSquare { rows: l.rows, cols: l.cols });
    }
    if l.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "factor is {}x{} but right-hand side has {} rows",
            l.rows, l.cols, b.rows
        )));
    }
    if let Some(index) = (0..l.rows).find(|&i| l[(i, i)] == 0.0) {
        return Err(LinalgError::SingularFactor { index });
    }
    let mut x = b.clone();
    if transpose {
        solve_upper_t_in_place(l, &mut x);
    } else {
        solve_lower_in_place(l, &mut x);
    }
    Ok(x)
}

/// `A^{-1} B` through the factor's two triangular solves.
pub fn spd_solve(chol: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let y = tri_solve(&chol.l, b, false)?;
    tri_solve(&chol.l, &y, true)
}

pub fn logdet(chol: &CholeskyFactor) -> f64 {
    2.0 * chol.l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Forward substitution in place; the diagonal must already be known nonzero.
pub(crate) fn solve_lower_in_place(l: &DenseMatrix, x: &mut DenseMatrix) {
    let n = l.rows;
    let cols = x.cols;
    let data = x.as_mut_slice();
    for i in 0..n {
        let (done, rest) = data.split_at_mut(i * cols);
        let row_i = &mut rest[..cols];
        for j in 0..i {
            let lij = l[(i, j)];
            if lij != 0.0 {
                axpy(-lij, &done[j * cols..(j + 1) * cols], row_i);
            }
        }
        let inv = 1.0 / l[(i, i)];
        row_i.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Back substitution against `L^T` in place.
pub(crate) fn solve_upper_t_in_place(l: &DenseMatrix, x: &mut DenseMatrix) {
    let n = l.rows;
    let cols = x.cols;
    let data = x.as_mut_slice();
    for i in (0..n).rev() {
        let (head, done) = data.split_at_mut((i + 1) * cols);
        let row_i = &mut head[i * cols..];
        for j in (i + 1)..n {
            let lji = l[(j, i)];
            if lji != 0.0 {
                axpy(-lji, &done[(j - i - 1) * cols..(j - i) * cols], row_i);
            }
        }
        let inv = 1.0 / l[(i, i)];
        row_i.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Reverse-mode step through a Cholesky factorization `A = L L^T`.
///
/// Given the factor and the adjoint of `L` (only the lower triangle is read),
/// returns the symmetric adjoint of `A`. Jitter is treated as a constant, so
/// the adjoint applies equally to the un-jittered matrix.
pub(crate) fn cholesky_backward(chol: &CholeskyFactor, l_bar: &DenseMatrix) -> DenseMatrix {
    let l = &chol.l;
    let n = l.rows;
    // P = Phi(L^T L_bar): lower triangle with halved diagonal.
    let mut p = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += l[(k, i)] * l_bar[(k, j)];
            }
            p[(i, j)] = if i == j { 0.5 * s } else { s };
        }
    }
    // S = L^{-T} P L^{-1}
    solve_upper_t_in_place(l, &mut p);
    let mut s = p.transpose();
    solve_upper_t_in_place(l, &mut s);
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (s[(i, j)] + s[(j, i)]);
        }
    }
    out
}
