//! Dense row-major linear algebra.
//!
//! Everything here is small-scale and deterministic: no threading inside a
//! single routine, fixed loop orders, no explicit matrix inverses.
//!
//! Flattening convention: [`vec`] stacks the rows of a matrix, so that
//! `kron(A1, A2) * vec(X) == vec(A1 * X * A2^T)` holds exactly.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{Error, Result};

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn ones(len: usize) -> Self {
        Self::filled(len, 1.0)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Vector(values.to_vec())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(other) {
            *s += alpha * o;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        Vector(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A dense real matrix in row-major order: `data[i * cols + j] = A[i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Vector {
        debug_assert_eq!(x.len(), self.cols);
        Vector((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `A^T y`
    pub fn matvec_t(&self, y: &[f64]) -> Vector {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            if *yi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        Vector(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows", self.cols),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A^T A`
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in 0..self.cols {
                    out.data[i * self.cols + j] += ri * row[j];
                }
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    /// `self += alpha * other`; shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Kronecker product, shape `(r1*r2) x (c1*c2)`.
pub fn kron(a1: &Matrix, a2: &Matrix) -> Matrix {
    let (r2, c2) = a2.shape();
    Matrix::from_fn(a1.rows() * r2, a1.cols() * c2, |i, j| {
        a1[(i / r2, j / c2)] * a2[(i % r2, j % c2)]
    })
}

/// Row-stacking flattening. Paired with [`kron`] so that
/// `|| A1 X A2^T - B ||_F^2 == || kron(A1, A2) vec(X) - vec(B) ||_2^2`.
pub fn vec(x: &Matrix) -> Vector {
    Vector(x.data().to_vec())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::new(rows, cols, v.to_vec())
}

/// `|| A1 X A2^T - B ||_F^2`
pub fn frobenius_objective(a1: &Matrix, x: &Matrix, a2: &Matrix, b: &Matrix) -> Result<f64> {
    let prod = a1.matmul(x)?.matmul(&a2.transpose())?;
    Ok(prod.sub(b)?.frobenius_norm_sq())
}

/// `|| kron(A1, A2) vec(X) - vec(B) ||_2^2`
pub fn vectorized_objective(a1: &Matrix, x: &Matrix, a2: &Matrix, b: &Matrix) -> Result<f64> {
    let k = kron(a1, a2);
    let vx = vec(x);
    if k.cols() != vx.len() || k.rows() != b.rows() * b.cols() {
        return Err(Error::shape(
            "vectorized_objective",
            format!("{} x {}", k.rows(), k.cols()),
            format!("vec(X) {}, vec(B) {}", vx.len(), b.rows() * b.cols()),
        ));
    }
    Ok(k.matvec(&vx).sub(&vec(b)).norm_sq())
}

/// Spectral norm (largest singular value) by power iteration on `A^T A`.
///
/// Stops once the eigenvalue estimate changes by less than `tol` relative.
pub fn operator_norm(a: &Matrix, tol: f64) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 || a.data().iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    // Fixed, non-symmetric start vector so the result is reproducible.
    let mut v: Vec<f64> = (0..n)
        .map(|j| 1.0 + 0.37 * ((j + 1) as f64).sin())
        .collect();
    let v_norm = norm(&v);
    v.iter_mut().for_each(|x| *x /= v_norm);

    let mut lambda = 0.0_f64;
    for _ in 0..100_000 {
        let w = a.matvec_t(&a.matvec(&v));
        let next = norm(&w);
        if next == 0.0 {
            // Start vector fell in the null space; restart on a basis vector.
            v = vec![0.0; n];
            v[0] = 1.0;
            continue;
        }
        v = w.iter().map(|x| x / next).collect();
        let done = (next - lambda).abs() <= tol * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda.sqrt()
}

/// Upper-triangular factor of a least-squares system; `R^T R = A^T A + ridge I`.
///
/// Solves with the Gram matrix go through two triangular solves.
#[derive(Debug, Clone)]
pub struct NormalFactor {
    r: Matrix,
}

impl NormalFactor {
    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    /// Solves `(A^T A + ridge I) y = rhs`.
    pub fn solve_normal(&self, rhs: &[f64]) -> Vector {
        let z = self.solve_rt(rhs);
        self.solve_r(&z)
    }

    /// Solves `R y = rhs` (back substitution).
    fn solve_r(&self, rhs: &[f64]) -> Vector {
        let n = self.dim();
        let mut y = rhs.to_vec();
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.r[(i, j)] * y[j];
            }
            y[i] = s / self.r[(i, i)];
        }
        Vector(y)
    }

    /// Solves `R^T y = rhs` (forward substitution).
    fn solve_rt(&self, rhs: &[f64]) -> Vector {
        let n = self.dim();
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.r[(j, i)] * y[j];
            }
            y[i] = s / self.r[(i, i)];
        }
        Vector(y)
    }
}

/// Householder QR of `[A; sqrt(ridge) I]`, applying the reflections to `rhs`
/// (zero-padded) as it goes. Returns the triangular factor and `Q^T rhs`
/// truncated to the first `cols` entries.
fn householder(a: &Matrix, ridge: f64, rhs: &[f64]) -> (Matrix, Vec<f64>) {
    let (m0, n) = a.shape();
    let m = if ridge > 0.0 { m0 + n } else { m0 };
    let mut work = Matrix::zeros(m, n);
    work.data_mut()[..m0 * n].copy_from_slice(a.data());
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for j in 0..n {
            work[(m0 + j, j)] = s;
        }
    }
    let mut qtb = vec![0.0; m];
    qtb[..m0].copy_from_slice(rhs);

    let steps = n.min(m);
    let mut v = vec![0.0; m];
    for k in 0..steps {
        let col_norm = (k..m).map(|i| work[(i, k)].powi(2)).sum::<f64>().sqrt();
        if col_norm == 0.0 {
            continue;
        }
        let alpha = if work[(k, k)] > 0.0 {
            -col_norm
        } else {
            col_norm
        };
        for i in k..m {
            v[i] = work[(i, k)];
        }
        v[k] -= alpha;
        let v_norm_sq: f64 = (k..m).map(|i| v[i] * v[i]).sum();
        if v_norm_sq == 0.0 {
            continue;
        }
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i] * work[(i, j)]).sum::<f64>() * 2.0 / v_norm_sq;
            for i in k..m {
                work[(i, j)] -= s * v[i];
            }
        }
        let s: f64 = (k..m).map(|i| v[i] * qtb[i]).sum::<f64>() * 2.0 / v_norm_sq;
        for i in k..m {
            qtb[i] -= s * v[i];
        }
    }
    let r = Matrix::from_fn(
        n,
        n,
        |i, j| if j >= i && i < m { work[(i, j)] } else { 0.0 },
    );
    qtb.truncate(n);
    qtb.resize(n, 0.0);
    (r, qtb)
}

fn check_conditioning(r: &Matrix) -> Result<()> {
    let diag: Vec<f64> = (0..r.rows()).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    // cond(A^T A) = cond(R)^2 is estimated from the diagonal of R.
    if max == 0.0 || !(min / max).is_finite() || (max / min).powi(2) > 1.0 / f64::EPSILON {
        return Err(Error::SingularSystem(format!(
            "Gram matrix condition estimate exceeds 1/eps (|R_ii| in [{min:e}, {max:e}])"
        )));
    }
    Ok(())
}

/// Factorizes `A^T A + ridge I` without forming it.
pub fn normal_factor(a: &Matrix, ridge: f64) -> Result<NormalFactor> {
    if !(ridge >= 0.0) {
        return Err(Error::PreconditionViolation(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    let (r, _) = householder(a, ridge, &vec![0.0; a.rows()]);
    check_conditioning(&r)?;
    Ok(NormalFactor { r })
}

/// `argmin_x ||A x - b||^2 + ridge ||x||^2`, via Householder QR.
///
/// With `ridge == 0` a numerically singular `A^T A` is reported as
/// [`Error::SingularSystem`].
pub fn least_squares(a: &Matrix, b: &[f64], ridge: f64) -> Result<Vector> {
    Ok(least_squares_factored(a, b, ridge)?.0)
}

/// Like [`least_squares`], also returning the factor for reuse.
pub fn least_squares_factored(a: &Matrix, b: &[f64], ridge: f64) -> Result<(Vector, NormalFactor)> {
    if a.rows() != b.len() {
        return Err(Error::shape("least_squares", a.rows(), b.len()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::PreconditionViolation(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    let (r, qtb) = householder(a, ridge, b);
    check_conditioning(&r)?;
    let factor = NormalFactor { r };
    let x = factor.solve_r(&qtb);
    Ok((x, factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_identity() {
        let x = least_squares(&Matrix::identity(3), &[1.0, 2.0, 3.0], 0.0).unwrap();
        for (a, b) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn least_squares_column_of_ones() {
        // A^T A = 2, A^T b = 2
        let a = Matrix::from_rows(&[&[1.0], &[1.0]]);
        let x = least_squares(&a, &[0.0, 2.0], 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn least_squares_zero_matrix_is_singular() {
        let err = least_squares(&Matrix::zeros(2, 2), &[1.0, 1.0], 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularSystem(_)));
    }

    #[test]
    fn least_squares_ridge_matches_closed_form() {
        // (A^T A + r I) x = A^T b with A = [[1],[1]], r = 2: 4x = 2
        let a = Matrix::from_rows(&[&[1.0], &[1.0]]);
        let x = least_squares(&a, &[0.0, 2.0], 2.0).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14);
        // ridge rescues the zero matrix
        let x = least_squares(&Matrix::zeros(2, 2), &[1.0, 1.0], 1e-3).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn least_squares_wide_is_singular_without_ridge() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        assert!(least_squares(&a, &[1.0], 0.0).is_err());
        assert!(least_squares(&a, &[1.0], 1e-6).is_ok());
    }

    #[test]
    fn normal_factor_solves_gram_system() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[0.5, -1.0], &[1.0, 3.0]]);
        let f = normal_factor(&a, 0.0).unwrap();
        let rhs = [1.0, -2.0];
        let y = f.solve_normal(&rhs);
        let back = a.gram().matvec(&y);
        for (u, v) in back.iter().zip(rhs) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn kron_scalar_identities() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(kron(&Matrix::from_rows(&[&[1.0]]), &a), a);
        assert_eq!(
            kron(&Matrix::from_rows(&[&[2.0]]), &Matrix::identity(2)),
            Matrix::identity(2).scaled(2.0)
        );
    }

    #[test]
    fn kron_two_by_two_block_expansion() {
        let a = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let b = Matrix::from_rows(&[&[4.0, 1.0], &[-1.0, 2.0]]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (4, 4));
        // block (p, q) equals a[p][q] * b
        for p in 0..2 {
            for q in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(k[(2 * p + i, 2 * q + j)], a[(p, q)] * b[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn vec_basics() {
        assert_eq!(vec(&Matrix::from_rows(&[&[5.0]])).as_slice(), &[5.0]);
        let x = Matrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 4.0, -1.0]]);
        assert!((vec(&x).norm() - x.frobenius_norm()).abs() < 1e-15);
        assert_eq!(unvec(&vec(&x), 2, 3).unwrap(), x);
    }

    #[test]
    fn operator_norm_simple() {
        assert!((operator_norm(&Matrix::identity(4), 1e-12) - 1.0).abs() < 1e-12);
        assert!((operator_norm(&Matrix::diag(&[3.0, 1.0]), 1e-12) - 3.0).abs() < 1e-10);
        assert_eq!(operator_norm(&Matrix::zeros(3, 2), 1e-12), 0.0);
    }
}
