//! Dense linear algebra primitives shared by every module in the crate.
//!
//! Everything here is deliberately small and deterministic: row-major storage,
//! straight-line loops, no blocking, no threads. Matrices in this crate stay
//! in the ~10^4-entry range, so clarity wins over throughput.

// The factorization and solve kernels index with the same subscripts the
// recurrences are written in.
#![allow(clippy::needless_range_loop)]

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix over a floating-point scalar.
///
/// Invariant: `entries.len() == rows * cols` and every entry is finite. The
/// checked constructors ([`DenseMatrix::from_vec`], [`DenseMatrix::from_columns`],
/// CSV parsing) enforce finiteness; the arithmetic methods preserve it for
/// finite operands of moderate magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<T>,
}

/// Ridge regularization for symmetric positive semidefinite solves.
///
/// The ridge actually added is `epsilon_rel * trace(gram) / dim`, i.e. the
/// mean diagonal entry scaled by `epsilon_rel`, which keeps the default
/// meaningful across problems of very different scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeConfig {
    pub epsilon_rel: f64,
}

impl RidgeConfig {
    pub fn new(epsilon_rel: f64) -> Result<Self> {
        if !epsilon_rel.is_finite() || epsilon_rel < 0.0 {
            return Err(Error::NonPositiveInput {
                name: "epsilon_rel",
                value: epsilon_rel,
            });
        }
        Ok(Self { epsilon_rel })
    }
}

impl Default for RidgeConfig {
    /// Scale-free default ridge of 1e-8 relative to the mean diagonal entry.
    fn default() -> Self {
        Self { epsilon_rel: 1e-8 }
    }
}

impl<T: Scalar> DenseMatrix<T> {
    /// Builds a matrix from row-major entries, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteInput(format!(
                "{rows}x{cols} matrix contains NaN or infinite entries"
            )));
        }
        Ok(Self { rows, cols, entries })
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    ///
    /// Finiteness is the closure's responsibility; use [`Self::from_vec`] when
    /// the entries come from untrusted data.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                entries.push(f(r, c));
            }
        }
        Self { rows, cols, entries }
    }

    /// Builds a matrix whose columns are the given equal-length vectors.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch(
                "columns must all have the same length".into(),
            ));
        }
        let mut m = Self::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteInput(format!(
                        "column {j} contains a non-finite entry"
                    )));
                }
                m.set(i, j, *v);
            }
        }
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, dim, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries[row * self.cols + col] = value;
    }

    /// Row `r` as a contiguous slice (row-major storage makes this free).
    pub fn row(&self, r: usize) -> &[T] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` copied into a fresh vector.
    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == T::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let v = out.get(i, j) + aik * rhs.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot apply {}x{} to a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(a, b)| *a * *b)
                    .sum::<T>()
            })
            .collect())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimensionMismatch(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&rhs.entries)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| *e * factor).collect(),
        }
    }

    /// Rank-one update `self += coef * u vᵀ`.
    pub fn add_outer(&mut self, coef: T, u: &[T], v: &[T]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "outer update {}x{} on a {}x{} matrix",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                let val = self.get(i, j) + coef * *ui * *vj;
                self.set(i, j, val);
            }
        }
        Ok(())
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Horizontal concatenation `[self | rhs]`.
    pub fn hstack(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "hstack of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self::from_fn(self.rows, self.cols + rhs.cols, |r, c| {
            if c < self.cols {
                self.get(r, c)
            } else {
                rhs.get(r, c - self.cols)
            }
        }))
    }

    pub fn max_abs(&self) -> T {
        self.entries
            .iter()
            .fold(T::zero(), |acc, e| acc.max(e.abs()))
    }

    /// Largest absolute entrywise difference between two equal-shape matrices.
    pub fn max_abs_diff(&self, rhs: &Self) -> Result<T> {
        Ok(self.sub(rhs)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.is_finite())
    }

    /// Serializes as CSV: first line `rows,cols`, then one line per row with
    /// entries printed to 17 significant digits (enough to round-trip f64).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{}", self.rows, self.cols);
        for r in 0..self.rows {
            let line = self
                .row(r)
                .iter()
                .map(|e| format!("{:.16e}", e.as_f64()))
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Parses the CSV form produced by [`Self::to_csv_string`].
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::ParseFailure("empty matrix file".into()))?;
        let mut dims = header.split(',').map(str::trim);
        let rows: usize = dims
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ParseFailure(format!("bad dimension header `{header}`")))?;
        let cols: usize = dims
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ParseFailure(format!("bad dimension header `{header}`")))?;
        if dims.next().is_some() {
            return Err(Error::ParseFailure(format!(
                "dimension header `{header}` has more than two fields"
            )));
        }
        let mut entries = Vec::with_capacity(rows * cols);
        for line in lines {
            for field in line.split(',') {
                let value: f64 = field.trim().parse().map_err(|_| {
                    Error::ParseFailure(format!("bad matrix entry `{}`", field.trim()))
                })?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteInput(format!(
                        "matrix entry `{}` is not finite",
                        field.trim()
                    )));
                }
                entries.push(T::of(value));
            }
        }
        if entries.len() != rows * cols {
            return Err(Error::ParseFailure(format!(
                "expected {rows}x{cols} = {} entries, found {}",
                rows * cols,
                entries.len()
            )));
        }
        Self::from_vec(rows, cols, entries)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| Error::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_str(&text)
    }
}

/// Columnwise softmax: `out[:, j] = exp(scores[:, j]) / sum(exp(scores[:, j]))`.
///
/// The column maximum is subtracted before exponentiation, which leaves the
/// ratios exact while preventing overflow for large scores.
pub fn column_softmax<T: Scalar>(scores: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = DenseMatrix::zeros(scores.rows(), scores.cols());
    for j in 0..scores.cols() {
        let col = scores.column(j);
        let max = col.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        let exps: Vec<T> = col.iter().map(|s| (*s - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (i, e) in exps.iter().enumerate() {
            out.set(i, j, *e / total);
        }
    }
    out
}

/// Solves `(gram + lambda I) X = rhs` for a symmetric PSD `gram` via Cholesky,
/// with `lambda = epsilon_rel * trace(gram) / dim`.
///
/// Only the symmetrized part `(gram + gramᵀ)/2` is read, so tiny asymmetries
/// from accumulated rounding do not disturb the factorization. A breakdown
/// (non-positive pivot) reports `FactorizationFailure`; the caller should
/// retry with a larger `epsilon_rel`.
pub fn solve_ridge<T: Scalar>(
    gram: &DenseMatrix<T>,
    rhs: &DenseMatrix<T>,
    cfg: &RidgeConfig,
) -> Result<DenseMatrix<T>> {
    let n = gram.rows();
    if gram.cols() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "gram must be square and non-empty, got {}x{}",
            gram.rows(),
            gram.cols()
        )));
    }
    if rhs.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "rhs has {} rows, gram is {n}x{n}",
            rhs.rows()
        )));
    }
    if !gram.is_finite() || !rhs.is_finite() {
        return Err(Error::NonFiniteInput("solve_ridge operands".into()));
    }
    let lambda = T::of(cfg.epsilon_rel) * gram.trace() / T::of_usize(n);

    // Cholesky factorization of the symmetrized, ridged gram: A = L Lᵀ.
    let half = T::of(0.5);
    let sym = |i: usize, j: usize| (gram.get(i, j) + gram.get(j, i)) * half;
    let mut l = DenseMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut diag = sym(j, j) + lambda;
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if diag <= T::zero() || !diag.is_finite() {
            return Err(Error::FactorizationFailure(format!(
                "non-positive pivot {diag} at column {j}; raise epsilon_rel"
            )));
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut v = sym(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }

    // Forward/back substitution per right-hand-side column.
    let mut x = DenseMatrix::zeros(n, rhs.cols());
    let mut y = vec![T::zero(); n];
    for c in 0..rhs.cols() {
        for i in 0..n {
            let mut v = rhs.get(i, c);
            for k in 0..i {
                v -= l.get(i, k) * y[k];
            }
            y[i] = v / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, v / l.get(i, i));
        }
    }
    Ok(x)
}

/// Frobenius norm: square root of the sum of squared entries.
pub fn frobenius_norm<T: Scalar>(m: &DenseMatrix<T>) -> T {
    m.entries()
        .iter()
        .map(|e| *e * *e)
        .sum::<T>()
        .sqrt()
}

/// Euclidean norm of a vector slice.
pub fn vector_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|e| *e * *e).sum::<T>().sqrt()
}

/// Inner product of two equal-length slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Largest absolute componentwise difference between two equal-length slices.
pub fn vector_max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).abs()))
}

const POWER_ITERATION_MAX: usize = 10_000;

/// Largest singular value of `m`, estimated by power iteration on the smaller
/// of `mᵀm` and `m mᵀ` with relative convergence tolerance `tol`.
///
/// The start vector is drawn from a fixed internal seed so results are
/// deterministic; a random start almost surely overlaps the leading
/// eigenspace, which an all-ones start does not guarantee.
pub fn spectral_norm<T: Scalar>(m: &DenseMatrix<T>, tol: f64) -> Result<T> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::NonPositiveInput {
            name: "tol",
            value: tol,
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteInput("spectral_norm operand".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(T::zero());
    }
    // Work on the Gram matrix of the shorter side; its top eigenvalue is the
    // squared spectral norm.
    let b = if m.cols() <= m.rows() {
        m.transpose().matmul(m)?
    } else {
        m.matmul(&m.transpose())?
    };
    let n = b.rows();
    if b.max_abs() == T::zero() {
        return Ok(T::zero());
    }

    let mut rng = crate::rng::stream(0x5EED_0BA5_ED0F_F1CE);
    let mut v: Vec<T> = crate::rng::normal_vec(n, &mut rng);
    let norm = vector_norm(&v);
    for e in v.iter_mut() {
        *e = *e / norm;
    }

    let tol_t = T::of(tol);
    let mut lambda_prev = T::zero();
    let mut last_delta = f64::INFINITY;
    for _ in 0..POWER_ITERATION_MAX {
        let w = b.matvec(&v)?;
        let lambda = dot(&v, &w);
        let wnorm = vector_norm(&w);
        if wnorm == T::zero() {
            // v landed exactly in the null space; the projected operator is 0.
            return Ok(T::zero());
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = *wi / wnorm;
        }
        let delta = (lambda - lambda_prev).abs();
        if delta <= tol_t * lambda.max(T::min_positive_value()) {
            return Ok(lambda.max(T::zero()).sqrt());
        }
        last_delta = delta.as_f64();
        lambda_prev = lambda;
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITERATION_MAX,
        last_delta,
    })
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// All eigenvalues of a symmetric matrix, ascending, via cyclic Jacobi
/// rotations.
///
/// Only the symmetrized part `(m + mᵀ)/2` is read.  Unlike power iteration
/// this handles degenerate and clustered spectra without stalling, which
/// matters for ridged second moments whose smallest eigenvalues coincide at
/// the ridge level.
pub fn symmetric_eigenvalues<T: Scalar>(m: &DenseMatrix<T>) -> Result<Vec<T>> {
    let n = m.rows();
    if m.cols() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalues need a square non-empty matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteInput("symmetric_eigenvalues operand".into()));
    }

    let half = T::of(0.5);
    let mut a: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| (m.get(i, j) + m.get(j, i)) * half).collect())
        .collect();

    // The Frobenius norm is invariant under the rotations; fix the stopping
    // scale once.
    let fro_sq: T = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|e| *e * *e)
        .sum();
    let tol_sq = T::of(1e-28) * fro_sq;

    let mut off_sq = T::zero();
    for sweep in 0..JACOBI_MAX_SWEEPS {
        off_sq = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off_sq += a[i][j] * a[i][j];
            }
        }
        if off_sq <= tol_sq {
            let mut eigs: Vec<T> = (0..n).map(|i| a[i][i]).collect();
            eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
            return Ok(eigs);
        }
        let _ = sweep;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::of(2.0) * apq);
                // Smaller-magnitude root of t^2 + 2 theta t - 1 = 0; the
                // asymptotic form guards against theta^2 overflowing.
                let t = if theta.abs() < T::of(1e150) {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                } else {
                    (T::of(2.0) * theta).recip()
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                let app = a[p][p];
                let aqq = a[q][q];
                a[p][p] = app - t * apq;
                a[q][q] = aqq + t * apq;
                a[p][q] = T::zero();
                a[q][p] = T::zero();
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    let new_ip = c * aip - s * aiq;
                    let new_iq = s * aip + c * aiq;
                    a[i][p] = new_ip;
                    a[p][i] = new_ip;
                    a[i][q] = new_iq;
                    a[q][i] = new_iq;
                }
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: JACOBI_MAX_SWEEPS,
        last_delta: off_sq.as_f64().sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn mat(rows: usize, cols: usize, entries: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::from_vec(rows, cols, entries.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let out = column_softmax(&mat(2, 1, &[0.0, 0.0]));
        assert_abs_diff_eq!(out.get(0, 0), 0.5, epsilon = TOL);
        assert_abs_diff_eq!(out.get(1, 0), 0.5, epsilon = TOL);
    }

    #[test]
    fn softmax_of_log_three_vs_zero_splits_three_to_one() {
        let out = column_softmax(&mat(2, 1, &[3.0_f64.ln(), 0.0]));
        assert_abs_diff_eq!(out.get(0, 0), 0.75, epsilon = TOL);
        assert_abs_diff_eq!(out.get(1, 0), 0.25, epsilon = TOL);
    }

    #[test]
    fn softmax_matches_plain_exp_normalize_oracle() {
        // Oracle: no max subtraction, straight exp-then-normalize. Safe here
        // because the test scores are small.
        let scores = rng::normal_matrix::<f64>(3, 2, &mut rng::stream(7));
        let out = column_softmax(&scores);
        for j in 0..2 {
            let col = scores.column(j);
            let exps: Vec<f64> = col.iter().map(|s| s.exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut col_sum = 0.0;
            for i in 0..3 {
                assert_abs_diff_eq!(out.get(i, j), exps[i] / total, epsilon = TOL);
                col_sum += out.get(i, j);
            }
            assert_abs_diff_eq!(col_sum, 1.0, epsilon = TOL);
        }
    }

    #[test]
    fn solve_ridge_identity_reproduces_rhs() {
        let eye = DenseMatrix::<f64>::identity(2);
        let x = solve_ridge(&eye, &eye, &RidgeConfig { epsilon_rel: 0.0 }).unwrap();
        assert_eq!(x, eye);
    }

    #[test]
    fn solve_ridge_diagonal_solve() {
        let gram = mat(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let rhs = mat(2, 1, &[1.0, 1.0]);
        let x = solve_ridge(&gram, &rhs, &RidgeConfig { epsilon_rel: 0.0 }).unwrap();
        assert_abs_diff_eq!(x.get(0, 0), 0.5, epsilon = TOL);
        assert_abs_diff_eq!(x.get(1, 0), 0.25, epsilon = TOL);
    }

    #[test]
    fn solve_ridge_random_spd_residual_is_tiny() {
        let mut stream = rng::stream(3);
        let r = rng::normal_matrix::<f64>(8, 8, &mut stream);
        // R Rᵀ + 0.5 I is comfortably positive definite.
        let gram = r
            .matmul(&r.transpose())
            .unwrap()
            .add(&DenseMatrix::identity(8).scaled(0.5))
            .unwrap();
        let rhs = rng::normal_matrix::<f64>(8, 3, &mut stream);
        let cfg = RidgeConfig::default();
        let x = solve_ridge(&gram, &rhs, &cfg).unwrap();

        let lambda = cfg.epsilon_rel * gram.trace() / 8.0;
        let ridged = gram
            .add(&DenseMatrix::identity(8).scaled(lambda))
            .unwrap();
        let residual = frobenius_norm(&ridged.matmul(&x).unwrap().sub(&rhs).unwrap());
        assert!(residual <= 1e-10, "residual {residual} too large");
    }

    #[test]
    fn solve_ridge_rejects_indefinite_gram() {
        let gram = mat(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let rhs = mat(2, 1, &[1.0, 1.0]);
        let err = solve_ridge(&gram, &rhs, &RidgeConfig { epsilon_rel: 0.0 }).unwrap_err();
        assert!(matches!(err, Error::FactorizationFailure(_)));
    }

    #[test]
    fn frobenius_norm_examples() {
        assert_eq!(frobenius_norm(&DenseMatrix::<f64>::zeros(3, 2)), 0.0);
        assert_abs_diff_eq!(
            frobenius_norm(&DenseMatrix::<f64>::identity(3)),
            3.0_f64.sqrt(),
            epsilon = TOL
        );
        assert_abs_diff_eq!(frobenius_norm(&mat(1, 2, &[3.0, 4.0])), 5.0, epsilon = TOL);
    }

    #[test]
    fn spectral_norm_of_diagonal_picks_largest_entry() {
        let m = mat(2, 2, &[1.0, 0.0, 0.0, 5.0]);
        assert_abs_diff_eq!(spectral_norm(&m, 1e-12).unwrap(), 5.0, epsilon = 1e-10);
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_zero() {
        assert_eq!(spectral_norm(&DenseMatrix::<f64>::zeros(4, 3), 1e-12).unwrap(), 0.0);
    }

    /// Jacobi eigenvalue iteration on a symmetric matrix, used as an
    /// independent oracle for the power-iteration spectral norm.
    fn jacobi_top_eigenvalue(a: &DenseMatrix<f64>) -> f64 {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[p][q].abs();
                }
            }
            if off < 1e-14 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (m[q][q] - m[p][p]) / m[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[k][p];
                        let mkq = m[k][q];
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p][k];
                        let mqk = m[q][k];
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i][i]).fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn spectral_norm_matches_jacobi_oracle_on_random_matrix() {
        let m = rng::normal_matrix::<f64>(6, 4, &mut rng::stream(11));
        let gram = m.transpose().matmul(&m).unwrap();
        let oracle = jacobi_top_eigenvalue(&gram).max(0.0).sqrt();
        let estimate = spectral_norm(&m, 1e-12).unwrap();
        assert_abs_diff_eq!(estimate, oracle, epsilon = 1e-8);
    }

    #[test]
    fn eigenvalues_of_diagonal_matrix_are_its_entries() {
        let m = mat(3, 3, &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5]);
        let eigs = symmetric_eigenvalues(&m).unwrap();
        assert_eq!(eigs, vec![-1.0, 0.5, 2.0]);
    }

    #[test]
    fn eigenvalues_match_two_by_two_closed_form() {
        // [[a, b], [b, c]] has eigenvalues (a+c)/2 +- sqrt(((a-c)/2)^2 + b^2).
        let (a, b, c) = (1.5, -0.7, 0.25);
        let m = mat(2, 2, &[a, b, b, c]);
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let eigs = symmetric_eigenvalues(&m).unwrap();
        assert_abs_diff_eq!(eigs[0], mid - rad, epsilon = 1e-14);
        assert_abs_diff_eq!(eigs[1], mid + rad, epsilon = 1e-14);
    }

    #[test]
    fn eigenvalues_preserve_trace_and_frobenius_norm() {
        let g = rng::normal_matrix::<f64>(7, 7, &mut rng::stream(31));
        let sym = g.add(&g.transpose()).unwrap().scaled(0.5);
        let eigs = symmetric_eigenvalues(&sym).unwrap();
        let trace: f64 = eigs.iter().sum();
        assert_abs_diff_eq!(trace, sym.trace(), epsilon = 1e-10);
        let sq: f64 = eigs.iter().map(|e| e * e).sum();
        let fro = frobenius_norm(&sym);
        assert_abs_diff_eq!(sq, fro * fro, epsilon = 1e-10);
        // Largest magnitude agrees with the power-iteration spectral norm.
        let top = eigs.iter().fold(0.0_f64, |acc, e| acc.max(e.abs()));
        assert_abs_diff_eq!(top, spectral_norm(&sym, 1e-12).unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn eigenvalues_of_gram_matrices_are_nonnegative() {
        let m = rng::normal_matrix::<f64>(4, 9, &mut rng::stream(32));
        let gram = m.matmul(&m.transpose()).unwrap();
        let eigs = symmetric_eigenvalues(&gram).unwrap();
        assert!(eigs.iter().all(|e| *e >= -1e-10));
        assert!(eigs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eigenvalues_handle_degenerate_spectra() {
        // Identity plus a tiny rank-one bump: n-1 coincident eigenvalues.
        let n = 6;
        let mut m = DenseMatrix::<f64>::identity(n);
        m.add_outer(1e-9, &vec![1.0; n], &vec![1.0; n]).unwrap();
        let eigs = symmetric_eigenvalues(&m).unwrap();
        for e in &eigs[..n - 1] {
            assert_abs_diff_eq!(*e, 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(eigs[n - 1], 1.0 + n as f64 * 1e-9, epsilon = 1e-12);
        assert_eq!(symmetric_eigenvalues(&DenseMatrix::<f64>::zeros(3, 3)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn eigenvalues_reject_non_square_input() {
        let m = DenseMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            symmetric_eigenvalues(&m),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = rng::normal_matrix::<f64>(4, 3, &mut rng::stream(21));
        let text = m.to_csv_string();
        assert!(text.starts_with("4,3\n"));
        let back = DenseMatrix::<f64>::from_csv_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(matches!(
            DenseMatrix::<f64>::from_csv_str(""),
            Err(Error::ParseFailure(_))
        ));
        assert!(matches!(
            DenseMatrix::<f64>::from_csv_str("2,2\n1.0,2.0\n3.0"),
            Err(Error::ParseFailure(_))
        ));
        assert!(matches!(
            DenseMatrix::<f64>::from_csv_str("1,1\nbogus"),
            Err(Error::ParseFailure(_))
        ));
        assert!(matches!(
            DenseMatrix::<f64>::from_csv_str("1,1\ninf"),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn constructors_validate_shape_and_finiteness() {
        assert!(matches!(
            DenseMatrix::from_vec(2, 2, vec![1.0_f64; 3]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFiniteInput(_))
        ));
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix<f64>> {
        proptest::collection::vec(-3.0_f64..3.0, rows * cols)
            .prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_is_shift_invariant_per_column(
            m in small_matrix(4, 3),
            shift in -5.0_f64..5.0,
            col in 0_usize..3,
        ) {
            let mut shifted = m.clone();
            for r in 0..4 {
                shifted.set(r, col, shifted.get(r, col) + shift);
            }
            let a = column_softmax(&m);
            let b = column_softmax(&shifted);
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }

        #[test]
        fn softmax_columns_sum_to_one(m in small_matrix(5, 4)) {
            let out = column_softmax(&m);
            for j in 0..4 {
                let s: f64 = out.column(j).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(out.column(j).iter().all(|p| *p > 0.0 && *p <= 1.0));
            }
        }

        #[test]
        fn product_norm_is_submultiplicative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 2),
        ) {
            let lhs = frobenius_norm(&a.matmul(&b).unwrap());
            let rhs = spectral_norm(&a, 1e-12).unwrap() * frobenius_norm(&b);
            prop_assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn ridge_free_solve_matches_direct_inverse(
            seed in 0_u64..1000,
        ) {
            // Well-conditioned SPD gram: R Rᵀ + I.
            let mut stream = rng::stream(seed);
            let r = rng::normal_matrix::<f64>(4, 4, &mut stream);
            let gram = r.matmul(&r.transpose()).unwrap()
                .add(&DenseMatrix::identity(4)).unwrap();
            let cfg = RidgeConfig { epsilon_rel: 0.0 };
            let inv = solve_ridge(&gram, &DenseMatrix::identity(4), &cfg).unwrap();
            let rhs = rng::normal_matrix::<f64>(4, 2, &mut stream);
            let direct = inv.matmul(&rhs).unwrap();
            let solved = solve_ridge(&gram, &rhs, &cfg).unwrap();
            let rel = frobenius_norm(&direct.sub(&solved).unwrap())
                / frobenius_norm(&solved).max(1e-300);
            prop_assert!(rel <= 1e-10);
        }
    }
}
