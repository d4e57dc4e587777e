//! Dense row-major matrices and the factorization / spectral primitives the
//! solvers are built on.
//!
//! Positive definiteness is always decided by Cholesky, Schur stability by a
//! Gelfand-sequence estimate cross-checked against convergence of a Lyapunov
//! series. There is deliberately no general eigensolver.

use std::fmt;
use std::ops::{Add, Deref, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry admitted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Dense real matrix, row-major, all entries finite.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn column(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// 1x1 matrix.
    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).take(self.rows).map(<[f64]>::to_vec).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matrix-vector dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self * middle * self^T`
    pub fn congruence(&self, middle: &Matrix) -> Matrix {
        &(self * middle) * &self.transpose()
    }

    pub fn sub_matrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "sub-matrix out of range");
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            out.data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + cols]);
        }
        out
    }

    /// Assemble from a grid of blocks. Every block row must share a height and
    /// every block column a width.
    pub fn block(blocks: &[&[&Matrix]]) -> Matrix {
        let heights: Vec<usize> = blocks.iter().map(|r| r[0].rows).collect();
        let widths: Vec<usize> = blocks[0].iter().map(|b| b.cols).collect();
        let mut out = Self::zeros(heights.iter().sum(), widths.iter().sum());
        let mut r0 = 0;
        for (bi, brow) in blocks.iter().enumerate() {
            assert_eq!(brow.len(), widths.len(), "block row length mismatch");
            let mut c0 = 0;
            for (bj, b) in brow.iter().enumerate() {
                assert_eq!(b.shape(), (heights[bi], widths[bj]), "block shape mismatch");
                for i in 0..b.rows {
                    for j in 0..b.cols {
                        out[(r0 + i, c0 + j)] = b[(i, j)];
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        out
    }

    pub fn hstack(parts: &[&Matrix]) -> Matrix {
        Self::block(&[parts])
    }

    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let rows: Vec<&[&Matrix]> = parts.iter().map(std::slice::from_ref).collect();
        Self::block(&rows)
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in {op}");
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{}{:?}", self.rows, self.cols, self.to_rows())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matrix product dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        self.check_same_shape(rhs, "add");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        self.check_same_shape(rhs, "sub");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &Matrix {
    type Output = Matrix;

    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

/// Symmetric matrix, stored symmetrized.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Accepts `m` if `max|m - m^T| <= 1e-12 (1 + max|m|)`, storing `(m + m^T)/2`.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let asym = (&m - &m.transpose()).max_abs();
        if asym > SYMMETRY_TOL * (1.0 + m.max_abs()) {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        Ok(Self::symmetrize(&m))
    }

    /// `(m + m^T)/2` without a tolerance check. For internally computed
    /// quantities that are symmetric up to rounding.
    pub fn symmetrize(m: &Matrix) -> Self {
        assert!(m.is_square(), "symmetrize needs a square matrix");
        let mut out = m.clone();
        let n = m.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Self(out)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn scalar(v: f64) -> Self {
        Self(Matrix::scalar(v))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// `x^T M x`
    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.0.mul_vec(x))
    }

    /// `tr(self * other)` for another symmetric matrix.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.dim(), other.dim(), "trace product dimension mismatch");
        self.0.data.iter().zip(&other.0.data).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(self.0.scale(s))
    }

    /// `self + shift * I`
    pub fn shift(&self, shift: f64) -> SymMatrix {
        let mut m = self.0.clone();
        for i in 0..m.rows {
            m[(i, i)] += shift;
        }
        SymMatrix(m)
    }

    /// `t M t^T`, symmetrized.
    pub fn congruence(&self, t: &Matrix) -> SymMatrix {
        SymMatrix::symmetrize(&t.congruence(&self.0))
    }
}

impl Deref for SymMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl TryFrom<Matrix> for SymMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<SymMatrix> for Matrix {
    fn from(m: SymMatrix) -> Self {
        m.0
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.0)
    }
}

/// Cholesky classification failure: the pivot at `pivot` (0-based) was not
/// above the tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

impl fmt::Display for NotPositiveDefinite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not positive definite: pivot {} = {:e}", self.pivot, self.value)
    }
}

impl From<NotPositiveDefinite> for Error {
    fn from(e: NotPositiveDefinite) -> Self {
        Error::NotPositiveDefinite { pivot: e.pivot, value: e.value }
    }
}

/// Pivot threshold `1e-12 * trace(m) / dim`, so classification does not
/// depend on the overall scale of `m`.
pub fn pivot_tol(m: &SymMatrix) -> f64 {
    let n = m.dim().max(1) as f64;
    (1e-12 * m.trace() / n).max(0.0)
}

/// Lower-triangular factor `L` with `L L^T = m`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn into_lower(self) -> Matrix {
        self.lower
    }

    /// Solves `L L^T X = rhs` by forward and back substitution.
    pub fn solve(&self, rhs: &Matrix) -> Matrix {
        let l = &self.lower;
        let n = l.rows();
        assert_eq!(rhs.rows(), n, "cholesky solve dimension mismatch");
        let mut x = rhs.clone();
        for c in 0..rhs.cols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
        }
        x
    }

    pub fn inverse(&self) -> SymMatrix {
        SymMatrix::symmetrize(&self.solve(&Matrix::identity(self.lower.rows())))
    }
}

/// Outcome of the elimination shared by all Cholesky variants.
enum Elimination {
    Factor(Matrix),
    Failed(NotPositiveDefinite),
}

/// `clamp`: pivots with `|d| <= tol` are zeroed instead of rejected.
fn eliminate(m: &SymMatrix, clamp: bool) -> Elimination {
    let n = m.dim();
    let tol = pivot_tol(m);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        let accepted = if clamp { d >= -tol } else { d > tol };
        if !accepted {
            return Elimination::Failed(NotPositiveDefinite { pivot: j, value: d });
        }
        if clamp && d <= tol {
            // Zero column: the remaining entries are O(sqrt(tol)) for a PSD input.
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Elimination::Factor(l)
}

pub fn cholesky(m: &SymMatrix) -> std::result::Result<Cholesky, NotPositiveDefinite> {
    match eliminate(m, false) {
        Elimination::Factor(lower) => Ok(Cholesky { lower }),
        Elimination::Failed(e) => Err(e),
    }
}

/// Factor `L` with `L L^T ≈ m` for positive semidefinite `m`; near-zero pivots
/// are clamped, clearly negative ones reject.
pub fn psd_factor(m: &SymMatrix) -> std::result::Result<Matrix, NotPositiveDefinite> {
    match eliminate(m, true) {
        Elimination::Factor(l) => Ok(l),
        Elimination::Failed(e) => Err(e),
    }
}

pub fn is_positive_definite(m: &SymMatrix) -> bool {
    cholesky(m).is_ok()
}

pub fn is_positive_semidefinite(m: &SymMatrix) -> bool {
    psd_factor(m).is_ok()
}

/// Smallest Cholesky pivot `d_j` (the Schur-complement diagonal). Positive iff
/// `m` is positive definite under [`pivot_tol`]; otherwise the first failing
/// pivot is returned, which is `<= tol`.
pub fn min_pivot(m: &SymMatrix) -> f64 {
    let n = m.dim();
    let tol = pivot_tol(m);
    let mut l = Matrix::zeros(n, n);
    let mut min = f64::INFINITY;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            return d.min(0.0);
        }
        min = min.min(d);
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    min
}

/// Largest `c >= 0` (to bisection precision) with `m - cI` certified positive
/// definite. `None` if `m` itself is not positive definite.
pub fn certified_min_eigen_lower(m: &SymMatrix) -> Option<f64> {
    if !is_positive_definite(m) {
        return None;
    }
    let n = m.dim();
    // Gershgorin-free upper bound: lambda_min <= smallest diagonal entry.
    let mut hi = (0..n).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min);
    let mut lo = 0.0;
    for _ in 0..200 {
        if hi - lo <= 1e-14 * hi.abs().max(1e-300) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if is_positive_definite(&m.shift(-mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Solves `m X = rhs` for `m` positive definite, with one step of iterative
/// refinement.
pub fn solve_linear(m: &SymMatrix, rhs: &Matrix) -> Result<Matrix> {
    if rhs.rows() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "solve_linear: {}x{} system with {} rhs rows",
            m.dim(),
            m.dim(),
            rhs.rows()
        )));
    }
    let chol = cholesky(m)?;
    let mut x = chol.solve(rhs);
    let r = &(m.as_matrix() * &x) - rhs;
    let dx = chol.solve(&r);
    x = &x - &dx;
    Ok(x)
}

/// Interval around 1 in which disagreement between the two stability
/// indicators is attributed to the estimate's resolution.
pub const STABILITY_BAND: f64 = 1e-4;

/// Spectral radius through the Gelfand sequence `||m^(2^j)||_F^(1/2^j)`, kept
/// in log scale to avoid overflow.
pub fn gelfand_estimate(m: &Matrix) -> f64 {
    assert!(m.is_square(), "spectral radius needs a square matrix");
    let f0 = m.frobenius();
    if f0 == 0.0 {
        return 0.0;
    }
    let mut x = m.scale(1.0 / f0);
    let mut log_scale = f0.ln();
    let mut power = 1.0_f64;
    let mut estimate = f0;
    for _ in 0..40 {
        x = &x * &x;
        log_scale *= 2.0;
        power *= 2.0;
        let f = x.frobenius();
        if f == 0.0 || !f.is_finite() {
            return if f == 0.0 { 0.0 } else { estimate };
        }
        x = x.scale(1.0 / f);
        log_scale += f.ln();
        let next = (log_scale / power).exp();
        let done = (next - estimate).abs() < 1e-6;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Whether `sum_t m^t (m^t)^T` converges, evaluated by doubling.
pub fn lyapunov_series_converges(m: &Matrix) -> bool {
    let n = m.rows();
    let mut s = Matrix::identity(n);
    let mut p = m.clone();
    for _ in 0..64 {
        let inc = p.congruence(&s);
        if !inc.is_finite() || inc.max_abs() > 1e150 {
            return false;
        }
        let done = inc.max_abs() <= 1e-12 * (1.0 + s.max_abs());
        s = &s + &inc;
        if done {
            return true;
        }
        p = &p * &p;
    }
    false
}

/// Spectral radius estimate, certified against the Lyapunov-series indicator.
/// Returns [`Error::Inconclusive`] when the two indicators disagree about
/// whether `rho < 1`.
pub fn spectral_radius_estimate(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "spectral radius of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let rho = gelfand_estimate(m);
    let converges = lyapunov_series_converges(m);
    if (rho < 1.0) != converges {
        return Err(Error::Inconclusive { estimate: rho, series_converged: converges });
    }
    Ok(rho)
}

/// `rho(m) < 1`, with estimates inside `1 ± STABILITY_BAND` decided by the
/// Lyapunov indicator alone.
pub fn is_schur_stable(m: &Matrix) -> Result<bool> {
    match spectral_radius_estimate(m) {
        Ok(rho) => Ok(rho < 1.0),
        Err(Error::Inconclusive { estimate, series_converged })
            if (estimate - 1.0).abs() <= STABILITY_BAND =>
        {
            Ok(series_converged)
        }
        Err(e) => Err(e),
    }
}

/// `E[(G z + h)^T W (G z + h)]` for `z ~ (mean, cov)`.
pub fn affine_quad_expectation(
    mean: &[f64],
    cov: &SymMatrix,
    g: &Matrix,
    h: &[f64],
    w: &SymMatrix,
) -> f64 {
    let m: Vec<f64> = g.mul_vec(mean).iter().zip(h).map(|(a, b)| a + b).collect();
    cov.congruence(g).trace_product(w) + w.quad(&m)
}
