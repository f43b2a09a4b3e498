//! Softmax regression: `f(x) = exp(Ax) / <exp(Ax), 1>`, its squared-error
//! loss `0.5 ||f(x) - b||^2`, derivatives, and the bound calculators.
//!
//! Orientation is `A x` throughout (`A` is `n x d`, `x` has length `d`).

use crate::error::{Error, Result};
use crate::linalg::{dot, operator_norm, Matrix, Vector};

/// Normalized exponential of `logits`, computed after subtracting the max.
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Vector::new(out)
}

/// `f(x)` for input `a`. Panics if `a.cols() != x.len()`.
pub fn softmax_predict(a: &Matrix, x: &[f64]) -> Vector {
    assert_eq!(
        a.cols(),
        x.len(),
        "softmax_predict: A has {} cols, x has {}",
        a.cols(),
        x.len()
    );
    softmax(&a.matvec(x))
}

/// `0.5 ||f(x) - b||^2`
pub fn sr_loss(a: &Matrix, b: &[f64], x: &[f64]) -> f64 {
    let f = softmax_predict(a, x);
    0.5 * f
        .iter()
        .zip(b)
        .map(|(fi, bi)| (fi - bi).powi(2))
        .sum::<f64>()
}

/// `A^T (diag(f) - f f^T) (f - b)`
pub fn sr_gradient(a: &Matrix, b: &[f64], x: &[f64]) -> Vector {
    let f = softmax_predict(a, x);
    let c = f.sub(b);
    a.matvec_t(&jacobian_apply(&f, &c))
}

/// Loss and gradient sharing one forward pass.
pub fn sr_loss_and_gradient(a: &Matrix, b: &[f64], x: &[f64]) -> (f64, Vector) {
    let f = softmax_predict(a, x);
    let c = f.sub(b);
    let loss = 0.5 * c.norm_sq();
    (loss, a.matvec_t(&jacobian_apply(&f, &c)))
}

/// `(diag(f) - f f^T) v`; the softmax Jacobian is symmetric.
pub(crate) fn jacobian_apply(f: &[f64], v: &[f64]) -> Vector {
    let fv = dot(f, v);
    Vector::new(f.iter().zip(v).map(|(fi, vi)| fi * (vi - fv)).collect())
}

/// Derivatives of `phi = lambda^T grad_x L(x; A, b)` for a fixed direction
/// `lambda`, used to differentiate gradient steps with respect to the data.
#[derive(Debug, Clone)]
pub struct AdjointPartials {
    /// `d phi / d x`, i.e. the Hessian-vector product `H(x) lambda`.
    pub wrt_x: Vector,
    /// `d phi / d A`
    pub wrt_a: Matrix,
    /// `d phi / d b`
    pub wrt_b: Vector,
}

/// With `p = A lambda`, `c = f - b`, `J = diag(f) - f f^T`:
/// `phi = p^T J c`, and the logit-space gradient is `J q` with
/// `q = p o c - (f^T c) p - (p^T f) c + J p`.
pub fn adjoint_partials(a: &Matrix, b: &[f64], x: &[f64], lambda: &[f64]) -> AdjointPartials {
    let f = softmax_predict(a, x);
    let c = f.sub(b);
    let p = a.matvec(lambda);
    let jc = jacobian_apply(&f, &c);
    let jp = jacobian_apply(&f, &p);
    let fc = dot(&f, &c);
    let pf = dot(&p, &f);
    let q: Vec<f64> = (0..f.len())
        .map(|j| p[j] * c[j] - fc * p[j] - pf * c[j] + jp[j])
        .collect();
    let r = jacobian_apply(&f, &q);

    let (n, d) = a.shape();
    let mut wrt_a = Matrix::zeros(n, d);
    for i in 0..n {
        let row = wrt_a.row_mut(i);
        for k in 0..d {
            row[k] = jc[i] * lambda[k] + r[i] * x[k];
        }
    }
    AdjointPartials {
        wrt_x: a.matvec_t(&r),
        wrt_a,
        wrt_b: jp.scaled(-1.0),
    }
}

/// One softmax-regression example with its norm budget `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct SrInstance {
    pub a: Matrix,
    pub b: Vector,
    pub radius: f64,
}

impl SrInstance {
    pub fn new(a: Matrix, b: Vector, radius: f64) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(Error::shape("SrInstance", a.rows(), b.len()));
        }
        Ok(SrInstance { a, b, radius })
    }

    pub fn predict(&self, x: &[f64]) -> Vector {
        softmax_predict(&self.a, x)
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        sr_loss(&self.a, &self.b, x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vector {
        sr_gradient(&self.a, &self.b, x)
    }

    /// Whether `||A|| <= R`, `||b|| <= 1` and `R > 4` all hold.
    pub fn satisfies_bound_preconditions(&self) -> bool {
        self.radius > 4.0 && operator_norm(&self.a, 1e-12) <= self.radius && self.b.norm() <= 1.0
    }
}

/// Constants from the smoothness and boundedness lemmas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// `4R`
    pub grad_bound: f64,
    /// `ln d + 2 ln n + 5 R^2`, the log of `d n^2 exp(5R^2)`.
    pub log_lipschitz: f64,
    /// `||f(x) - b|| <= 2` whenever `||b|| <= 1`.
    pub residual_bound: f64,
}

pub fn theoretical_bounds(n: usize, d: usize, radius: f64) -> Result<BoundReport> {
    if !(radius > 4.0) {
        return Err(Error::PreconditionViolation(format!(
            "bounds require R > 4, got {radius}"
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::PreconditionViolation("n and d must be >= 1".into()));
    }
    Ok(BoundReport {
        grad_bound: 4.0 * radius,
        log_lipschitz: (d as f64).ln() + 2.0 * (n as f64).ln() + 5.0 * radius * radius,
        residual_bound: 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_uniform() {
        let f = softmax_predict(&Matrix::zeros(4, 3), &[1.0, -2.0, 5.0]);
        assert!(f.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_class_closed_form() {
        // Ax = (ln 3, 0): exp gives (3, 1)
        let a = Matrix::from_rows(&[&[3f64.ln()], &[0.0]]);
        let f = softmax_predict(&a, &[1.0]);
        assert!((f[0] - 0.75).abs() < 1e-15);
        assert!((f[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let z = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        let (p, q) = (softmax(&z), softmax(&shifted));
        for (u, v) in p.iter().zip(q.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn no_overflow_on_large_logits() {
        let f = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(f.is_finite());
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_zero_at_exact_target() {
        let a = Matrix::from_rows(&[&[1.0, 0.5], &[-0.3, 2.0], &[0.0, 1.0]]);
        let x = [0.4, -0.7];
        let b = softmax_predict(&a, &x);
        assert_eq!(sr_loss(&a, &b, &x), 0.0);
        assert!(sr_gradient(&a, &b, &x).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn uniform_target_with_zero_input() {
        let a = Matrix::zeros(4, 2);
        let b = [0.25; 4];
        assert_eq!(sr_loss(&a, &b, &[3.0, -1.0]), 0.0);
        let g = sr_gradient(&a, &[1.0, 0.0, 0.0, 0.0], &[3.0, -1.0]);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bounds_arithmetic() {
        let r = theoretical_bounds(16, 16, 5.0).unwrap();
        assert_eq!(r.grad_bound, 20.0);
        assert!((r.log_lipschitz - (3.0 * 16f64.ln() + 125.0)).abs() < 1e-12);
        assert!((r.log_lipschitz - 133.317).abs() < 1e-3);
        assert_eq!(r.residual_bound, 2.0);
        assert!(matches!(
            theoretical_bounds(4, 4, 4.0),
            Err(Error::PreconditionViolation(_))
        ));
    }

    #[test]
    fn instance_rejects_mismatched_target() {
        assert!(SrInstance::new(Matrix::zeros(3, 2), Vector::zeros(2), 5.0).is_err());
    }
}
