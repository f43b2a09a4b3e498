//! Weight learning under the linear in-context model, where the inner
//! problem has the closed form `x = (A^T A)^-1 A^T b` on the weighted
//! aggregates and the validation loss is `sum_v ||A_v x - b_v||^2`.

use crate::error::{Error, Result};
use crate::inner::{common_shape, solve_weighted_linear_full, Example, LinearSolution, Ridge};
use crate::linalg::{Matrix, Vector};
use crate::ricl::StepRule;
use crate::trace::{TraceRow, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LariclGrad {
    /// Chain rule through the normal equations, reusing the factorization.
    Analytic,
    FiniteDifference {
        h: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LariclConfig {
    pub outer_steps: usize,
    pub outer_lr: f64,
    pub ridge: Ridge,
    pub grad_method: LariclGrad,
    pub step_rule: StepRule,
}

impl Default for LariclConfig {
    fn default() -> Self {
        LariclConfig {
            outer_steps: 100,
            outer_lr: 0.1,
            ridge: Ridge::Off,
            grad_method: LariclGrad::Analytic,
            step_rule: StepRule::Backtracking { max_halvings: 30 },
        }
    }
}

impl LariclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "outer_lr must be > 0, got {}",
                self.outer_lr
            )));
        }
        if let Ridge::Fixed(r) = self.ridge {
            if !(r >= 0.0) {
                return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {r}")));
            }
        }
        if let LariclGrad::FiniteDifference { h } = self.grad_method {
            if !(h > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "finite-difference step must be > 0, got {h}"
                )));
            }
        }
        Ok(())
    }
}

fn check_valset(valset: &[Example], examples: &[Example]) -> Result<()> {
    let (_, d) = common_shape(examples)?;
    let (_, dv) = common_shape(valset)?;
    if dv != d {
        return Err(Error::shape("validation inputs", d, dv));
    }
    Ok(())
}

fn residual_sum(valset: &[Example], x: &[f64]) -> f64 {
    valset
        .iter()
        .map(|v| v.a.matvec(x).sub(&v.b).norm_sq())
        .sum()
}

/// `sum_v ||A_v x(w) - b_v||^2`
pub fn laricl_val_loss(
    w_full: &[f64],
    examples: &[Example],
    valset: &[Example],
    ridge: Ridge,
) -> Result<f64> {
    check_valset(valset, examples)?;
    let sol = solve_weighted_linear_full(examples, w_full, ridge)?;
    Ok(residual_sum(valset, &sol.x))
}

/// With `r = b - A x`, `g = dL/dx` and `y = (A^T A + rho I)^-1 g`, the loss
/// moves by `<G_A, dA> + <G_b, db>` where `G_A = r y^T - (A y) x^T` and
/// `G_b = A y`.
fn analytic_grad(sol: &LinearSolution, examples: &[Example], valset: &[Example]) -> Vector {
    let x = &sol.x;
    let mut g = Vector::zeros(x.len());
    for v in valset {
        let resid = v.a.matvec(x).sub(&v.b);
        g.axpy(2.0, &v.a.matvec_t(&resid));
    }
    let y = sol.factor.solve_normal(&g);
    let r = sol.agg_b.sub(&sol.agg_a.matvec(x));
    let ay = sol.agg_a.matvec(&y);
    let (n, d) = sol.agg_a.shape();
    let mut g_a = Matrix::zeros(n, d);
    for j in 0..n {
        for (k, o) in g_a.row_mut(j).iter_mut().enumerate() {
            *o = r[j] * y[k] - ay[j] * x[k];
        }
    }
    let inv_m = 1.0 / examples.len() as f64;
    let mut grad = Vec::with_capacity(examples.len() * (n + 1));
    for e in examples {
        for j in 0..n {
            let s: f64 = g_a.row(j).iter().zip(e.a.row(j)).map(|(g, a)| g * a).sum();
            grad.push(inv_m * s);
        }
        grad.push(inv_m * ay.dot(&e.b));
    }
    Vector::new(grad)
}

/// Gradient of [`laricl_val_loss`] in the `[w_a_1, w_b_1, ...]` layout.
pub fn laricl_grad(
    w_full: &[f64],
    examples: &[Example],
    valset: &[Example],
    ridge: Ridge,
    method: LariclGrad,
) -> Result<Vector> {
    check_valset(valset, examples)?;
    match method {
        LariclGrad::Analytic => {
            let sol = solve_weighted_linear_full(examples, w_full, ridge)?;
            Ok(analytic_grad(&sol, examples, valset))
        }
        LariclGrad::FiniteDifference { h } => {
            let mut probe = w_full.to_vec();
            let mut grad = Vec::with_capacity(w_full.len());
            for k in 0..w_full.len() {
                probe[k] = w_full[k] + h;
                let up = laricl_val_loss(&probe, examples, valset, ridge)?;
                probe[k] = w_full[k] - h;
                let dn = laricl_val_loss(&probe, examples, valset, ridge)?;
                probe[k] = w_full[k];
                grad.push((up - dn) / (2.0 * h));
            }
            Ok(Vector::new(grad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LariclOutcome {
    pub w: Vector,
    pub trace: TrainTrace,
    /// Closed-form solution at the final weights.
    pub x: Vector,
}

/// Gradient descent on the linear validation loss from `w = 1`.
pub fn laricl_train(
    examples: &[Example],
    valset: &[Example],
    cfg: &LariclConfig,
) -> Result<LariclOutcome> {
    laricl_train_observed(examples, valset, cfg, |_, _| Ok(()))
}

/// [`laricl_train`], calling `on_iterate(t, w_t)` for every visited iterate.
pub fn laricl_train_observed(
    examples: &[Example],
    valset: &[Example],
    cfg: &LariclConfig,
    mut on_iterate: impl FnMut(usize, &Vector) -> Result<()>,
) -> Result<LariclOutcome> {
    cfg.validate()?;
    check_valset(valset, examples)?;
    let (n, _) = common_shape(examples)?;
    let mut w = Vector::ones(examples.len() * (n + 1));
    let mut current = laricl_val_loss(&w, examples, valset, cfg.ridge)?;
    if !current.is_finite() {
        return Err(Error::DivergenceDetected { step: 0 });
    }
    let mut rows = Vec::with_capacity(cfg.outer_steps + 1);
    for t in 0..=cfg.outer_steps {
        on_iterate(t, &w)?;
        let grad = laricl_grad(&w, examples, valset, cfg.ridge, cfg.grad_method)?;
        let grad_norm_sq = grad.norm_sq();
        if !grad_norm_sq.is_finite() {
            return Err(Error::DivergenceDetected { step: t });
        }
        let mut row = TraceRow {
            step: t,
            l_valid: current,
            grad_norm_sq,
            step_size: 0.0,
        };
        if t == cfg.outer_steps {
            rows.push(row);
            break;
        }
        let moved = |alpha: f64| -> Vector {
            let mut next = w.clone();
            next.axpy(-alpha, &grad);
            next
        };
        match cfg.step_rule {
            StepRule::Fixed => {
                let next = moved(cfg.outer_lr);
                let value = laricl_val_loss(&next, examples, valset, cfg.ridge)?;
                if !value.is_finite() {
                    return Err(Error::DivergenceDetected { step: t + 1 });
                }
                row.step_size = cfg.outer_lr;
                w = next;
                current = value;
            }
            StepRule::Backtracking { max_halvings } => {
                if grad_norm_sq > 0.0 {
                    let mut alpha = cfg.outer_lr;
                    for _ in 0..=max_halvings {
                        let next = moved(alpha);
                        // A step into a singular system is simply rejected.
                        match laricl_val_loss(&next, examples, valset, cfg.ridge) {
                            Ok(value) if value <= current => {
                                row.step_size = alpha;
                                w = next;
                                current = value;
                                break;
                            }
                            Ok(_) | Err(Error::SingularSystem(_)) => alpha *= 0.5,
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        }
        rows.push(row);
    }
    let x = solve_weighted_linear_full(examples, &w, cfg.ridge)?.x;
    Ok(LariclOutcome {
        w,
        trace: TrainTrace { rows },
        x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn linear_task(m: usize, n: usize, seed: u64) -> (Vector, Vec<Example>, Vec<Example>) {
        let mut s = RngStream::new(seed, 0).sampler();
        let x = s.gauss_vector(n);
        let mut make = |count: usize| -> Vec<Example> {
            (0..count)
                .map(|_| {
                    let a = s.gauss_matrix(n, n);
                    let b = a.matvec(&x);
                    Example::new(a, b).unwrap()
                })
                .collect()
        };
        let ex = make(m);
        let val = make(3);
        (x, ex, val)
    }

    #[test]
    fn consistent_data_has_zero_loss() {
        let (_, ex, val) = linear_task(3, 3, 1);
        let w = vec![1.0; 12];
        assert!(laricl_val_loss(&w, &ex, &val, Ridge::Off).unwrap() <= 1e-18);
        let g = laricl_grad(&w, &ex, &val, Ridge::Off, LariclGrad::Analytic).unwrap();
        assert!(g.norm() <= 1e-9);
    }

    #[test]
    fn joint_scaling_is_invisible() {
        let (_, ex, _) = linear_task(2, 3, 2);
        let mut s = RngStream::new(20, 0).sampler();
        let val: Vec<Example> = (0..3)
            .map(|_| Example::new(s.gauss_matrix(3, 3), s.gauss_vector(3)).unwrap())
            .collect();
        let w: Vec<f64> = s.gauss_vector(8).iter().map(|v| 1.0 + 0.2 * v).collect();
        let base = laricl_val_loss(&w, &ex, &val, Ridge::Off).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| 3.5 * v).collect();
        let other = laricl_val_loss(&scaled, &ex, &val, Ridge::Off).unwrap();
        assert!((base - other).abs() <= 1e-10 * base.max(1.0));
        // so the gradient is orthogonal to w itself
        let g = laricl_grad(&w, &ex, &val, Ridge::Off, LariclGrad::Analytic).unwrap();
        assert!(g.dot(&w).abs() <= 1e-8 * g.norm().max(1.0) * Vector::from_slice(&w).norm());
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut s = RngStream::new(3, 0).sampler();
        let ex: Vec<Example> = (0..2)
            .map(|_| Example::new(s.gauss_matrix(3, 3), s.gauss_vector(3)).unwrap())
            .collect();
        let val: Vec<Example> = (0..3)
            .map(|_| Example::new(s.gauss_matrix(3, 3), s.gauss_vector(3)).unwrap())
            .collect();
        let w: Vec<f64> = s.gauss_vector(8).iter().map(|v| 1.0 + 0.3 * v).collect();
        let a = laricl_grad(&w, &ex, &val, Ridge::Off, LariclGrad::Analytic).unwrap();
        let fd = laricl_grad(
            &w,
            &ex,
            &val,
            Ridge::Off,
            LariclGrad::FiniteDifference { h: 1e-5 },
        )
        .unwrap();
        assert!(a.sub(&fd).norm() <= 1e-6 * fd.norm());
    }

    #[test]
    fn zero_steps_keeps_ones() {
        let (_, ex, val) = linear_task(2, 2, 4);
        let cfg = LariclConfig {
            outer_steps: 0,
            ..LariclConfig::default()
        };
        let out = laricl_train(&ex, &val, &cfg).unwrap();
        assert_eq!(out.w, Vector::ones(6));
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn clean_data_stays_at_zero() {
        let (x_true, ex, val) = linear_task(3, 2, 5);
        let out = laricl_train(&ex, &val, &LariclConfig::default()).unwrap();
        let first = out.trace.rows[0].l_valid;
        assert!(out.trace.rows.iter().all(|r| r.l_valid <= first));
        assert!(out.x.sub(&x_true).norm() <= 1e-9);
    }

    #[test]
    fn corrupted_example_loses_target_weight() {
        let (_, mut ex, val) = linear_task(2, 2, 6);
        ex[1].b = ex[1].b.add(&[4.0, -3.0]);
        let cfg = LariclConfig {
            outer_steps: 50,
            ..LariclConfig::default()
        };
        let out = laricl_train(&ex, &val, &cfg).unwrap();
        assert!(out.w[5].abs() < 1.0, "w_b_2 = {}", out.w[5]);
        assert!(out.trace.is_monotone_within(1e-12));
        assert!(out.trace.rows.last().unwrap().l_valid < out.trace.rows[0].l_valid);
    }

    #[test]
    fn singular_aggregate_is_reported() {
        let (_, ex, val) = linear_task(2, 2, 7);
        let w = vec![0.0; 6];
        assert!(matches!(
            laricl_val_loss(&w, &ex, &val, Ridge::Off),
            Err(Error::SingularSystem(_))
        ));
    }
}
