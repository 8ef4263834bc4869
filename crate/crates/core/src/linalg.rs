//! Dense real linear algebra: pivoted LU, LDU normalization and the small set
//! of matrix kernels the rest of the crate is built on.
//!
//! Matrices are row-major `f64`. Permutations are stored as index vectors with
//! the convention that row `i` of the pivoted matrix `P·A` is row `perm[i]` of
//! `A`.

use std::cell::Cell;
use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative pivot tolerance: a pivot is rejected when its magnitude falls below
/// `PIVOT_TOL_REL * max|W|`.
pub const PIVOT_TOL_REL: f64 = 1e-12;

/// Magnitude of the uniform noise added by [`ldu_with_jitter`], relative to `max|W|`.
pub const JITTER_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error(
        "singular pivot at column {column}: |pivot| = {magnitude:e} below tolerance {tolerance:e}"
    )]
    SingularPivot {
        column: usize,
        magnitude: f64,
        tolerance: f64,
    },
    #[error("permutation is not a bijection on 0..{len}")]
    InvalidPermutation { len: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(LinalgError::BadLength {
                    rows: n_rows,
                    cols: n_cols,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(n_rows, n_cols, data)
    }

    /// Wraps already-computed data without the finiteness scan. Used for
    /// intermediate results, which may legitimately overflow during a
    /// diverging training run.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Keeps the first `cols` columns.
    pub fn leading_columns(&self, cols: usize) -> Self {
        assert!(cols <= self.cols);
        Self::from_fn(self.rows, cols, |r, c| self[(r, c)])
    }

    /// Keeps the first `rows` rows.
    pub fn leading_rows(&self, rows: usize) -> Self {
        assert!(rows <= self.rows);
        Self::from_vec_unchecked(rows, self.cols, self.data[..rows * self.cols].to_vec())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `A·B`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a.row(i).iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            for (o, &b_kj) in out_row.iter_mut().zip(b.row(k)) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// `A·Bᵀ` without materializing the transpose.
pub fn matmul_transpose_b(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(LinalgError::ShapeMismatch {
            op: "matmul_transpose_b",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// `Aᵀ·B` without materializing the transpose.
pub fn matmul_transpose_a(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "matmul_transpose_a",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &a_ki) in a.row(k).iter().enumerate() {
            if a_ki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ki * b_kj;
            }
        }
    }
    Ok(out)
}

pub fn matvec(a: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(LinalgError::ShapeMismatch {
            op: "matvec",
            left: a.shape(),
            right: (x.len(), 1),
        });
    }
    Ok((0..a.rows).map(|r| dot(a.row(r), x)).collect())
}

/// `Aᵀ·y`.
pub fn matvec_transpose(a: &DenseMatrix, y: &[f64]) -> Result<Vec<f64>> {
    if a.rows != y.len() {
        return Err(LinalgError::ShapeMismatch {
            op: "matvec_transpose",
            left: a.shape(),
            right: (y.len(), 1),
        });
    }
    let mut out = vec![0.0; a.cols];
    for (r, &y_r) in y.iter().enumerate() {
        for (o, &a_rc) in out.iter_mut().zip(a.row(r)) {
            *o += y_r * a_rc;
        }
    }
    Ok(out)
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    norm2(&a.data)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Output of [`lu_decompose`]: `P·W = L·U_raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuFactors {
    pub perm: Vec<usize>,
    /// Unit lower trapezoidal, `m × k`.
    pub lower: DenseMatrix,
    /// Upper trapezoidal, `k × n`, pivots on the diagonal.
    pub upper_raw: DenseMatrix,
    /// Absolute pivot tolerance used during elimination.
    pub pivot_tol: f64,
}

/// `W = Pᵀ·L·diag(z)·U` with unit trapezoidal `L` and `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LduFactors {
    pub perm: Vec<usize>,
    pub lower: DenseMatrix,
    pub diag: Vec<f64>,
    pub upper: DenseMatrix,
}

impl LduFactors {
    pub fn rank(&self) -> usize {
        self.diag.len()
    }
}

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of LDU factorizations performed on the current thread so far.
pub fn factorization_count() -> u64 {
    FACTORIZATIONS.with(Cell::get)
}

/// Pivoted LU with partial (row) pivoting.
///
/// At column `j` the pivot is the remaining row with the largest `|entry|`,
/// ties going to the lowest row index. Rectangular inputs produce trapezoidal
/// factors with `k = min(m, n)`.
pub fn lu_decompose(w: &DenseMatrix) -> Result<LuFactors> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(LinalgError::EmptyMatrix { rows: m, cols: n });
    }
    if let Some(pos) = w.data.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: pos / n,
            col: pos % n,
        });
    }
    let k = m.min(n);
    let pivot_tol = PIVOT_TOL_REL * w.max_abs();
    let mut a = w.data.clone();
    let mut perm: Vec<usize> = (0..m).collect();

    for j in 0..k {
        let mut p = j;
        let mut best = a[j * n + j].abs();
        for i in j + 1..m {
            let v = a[i * n + j].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < pivot_tol || best == 0.0 {
            return Err(LinalgError::SingularPivot {
                column: j,
                magnitude: best,
                tolerance: pivot_tol,
            });
        }
        if p != j {
            for c in 0..n {
                a.swap(j * n + c, p * n + c);
            }
            perm.swap(j, p);
        }
        let pivot = a[j * n + j];
        for i in j + 1..m {
            let l = a[i * n + j] / pivot;
            a[i * n + j] = l;
            if l != 0.0 {
                for c in j + 1..n {
                    a[i * n + c] -= l * a[j * n + c];
                }
            }
        }
    }

    let mut lower = DenseMatrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k.min(i) {
            lower[(i, j)] = a[i * n + j];
        }
        if i < k {
            lower[(i, i)] = 1.0;
        }
    }
    let mut upper_raw = DenseMatrix::zeros(k, n);
    for i in 0..k {
        for c in i..n {
            upper_raw[(i, c)] = a[i * n + c];
        }
    }
    Ok(LuFactors {
        perm,
        lower,
        upper_raw,
        pivot_tol,
    })
}

/// Splits `U_raw` into `diag(z)·U` with unit-diagonal `U`.
pub fn ldu_normalize(lu: LuFactors) -> Result<LduFactors> {
    let LuFactors {
        perm,
        lower,
        upper_raw,
        pivot_tol,
    } = lu;
    let (k, n) = upper_raw.shape();
    let mut diag = Vec::with_capacity(k);
    let mut upper = DenseMatrix::zeros(k, n);
    for i in 0..k {
        let d = upper_raw[(i, i)];
        if d.abs() < pivot_tol || d == 0.0 {
            return Err(LinalgError::SingularPivot {
                column: i,
                magnitude: d.abs(),
                tolerance: pivot_tol,
            });
        }
        diag.push(d);
        upper[(i, i)] = 1.0;
        for c in i + 1..n {
            upper[(i, c)] = upper_raw[(i, c)] / d;
        }
    }
    Ok(LduFactors {
        perm,
        lower,
        diag,
        upper,
    })
}

/// Full LDU factorization of `w`. Every call bumps the per-thread
/// [`factorization_count`].
pub fn ldu(w: &DenseMatrix) -> Result<LduFactors> {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    ldu_normalize(lu_decompose(w)?)
}

/// Like [`ldu`], but on `SingularPivot` adds uniform noise of magnitude
/// `JITTER_REL * max|W|` and retries once. Returns whether jitter was applied.
pub fn ldu_with_jitter(w: &DenseMatrix, seed: u64) -> Result<(LduFactors, bool)> {
    match ldu(w) {
        Ok(f) => Ok((f, false)),
        Err(LinalgError::SingularPivot { .. }) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // An all-zero matrix still needs a nonzero scale to escape.
            let scale = JITTER_REL * if w.max_abs() > 0.0 { w.max_abs() } else { 1.0 };
            let data = w
                .data
                .iter()
                .map(|v| v + scale * rng.random_range(-1.0..=1.0))
                .collect();
            let jittered = DenseMatrix::from_vec_unchecked(w.rows, w.cols, data);
            Ok((ldu(&jittered)?, true))
        }
        Err(e) => Err(e),
    }
}

pub fn check_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(LinalgError::InvalidPermutation { len: perm.len() });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Writes `pivoted[i]` into row `perm[i]`, i.e. applies `Pᵀ`.
pub fn unpivot_rows(perm: &[usize], pivoted: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(pivoted.rows, pivoted.cols);
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(pivoted.row(i));
    }
    out
}

/// `L·diag(z)·U` followed by the inverse row permutation.
pub fn reconstruct(factors: &LduFactors) -> Result<DenseMatrix> {
    let LduFactors {
        perm,
        lower,
        diag,
        upper,
    } = factors;
    if lower.cols != diag.len() || upper.rows != diag.len() || perm.len() != lower.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "reconstruct",
            left: lower.shape(),
            right: upper.shape(),
        });
    }
    check_permutation(perm)?;
    let mut scaled_lower = lower.clone();
    for r in 0..scaled_lower.rows {
        for (v, d) in scaled_lower.row_mut(r).iter_mut().zip(diag) {
            *v *= d;
        }
    }
    Ok(unpivot_rows(perm, &matmul(&scaled_lower, upper)?))
}
