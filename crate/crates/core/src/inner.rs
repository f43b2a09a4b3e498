//! Inner problem of the bilevel objective.
//!
//! Softmax form: `x* = argmin_x sum_i w_i L(x, A_i, b_i)` by fixed-step
//! gradient descent. Linear form: closed-form least squares on the weighted
//! aggregate `A = (1/m) sum_i diag(w_a_i) A_i`, `b = (1/m) sum_i w_b_i b_i`.

use crate::error::{Error, Result};
use crate::linalg::{least_squares_factored, Matrix, NormalFactor, Vector};
use crate::softmax::{softmax_predict, sr_loss_and_gradient};

/// One input-output pair `(A_i, b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub a: Matrix,
    pub b: Vector,
}

impl Example {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(Error::shape("Example", a.rows(), b.len()));
        }
        Ok(Example { a, b })
    }

    /// `(n, d)`
    pub fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }
}

/// Checks that all examples share one `(n, d)` and returns it.
pub fn common_shape(examples: &[Example]) -> Result<(usize, usize)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::PreconditionViolation("at least one example is required".into()))?;
    let shape = first.shape();
    for e in examples {
        if e.shape() != shape || e.b.len() != shape.0 {
            return Err(Error::shape(
                "examples",
                format!("{shape:?}"),
                format!("{:?}", e.shape()),
            ));
        }
    }
    Ok(shape)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zero,
    Given(Vector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerConfig {
    pub max_steps: usize,
    pub step_size: f64,
    pub grad_tol: f64,
    /// Project every iterate onto `||x|| <= R`.
    pub project_radius: Option<f64>,
    pub init: Init,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            max_steps: 500,
            step_size: 0.5,
            grad_tol: 1e-8,
            project_radius: None,
            init: Init::Zero,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step_size and grad_tol must be > 0 (got {}, {})",
                self.step_size, self.grad_tol
            )));
        }
        if let Some(r) = self.project_radius {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "project_radius must be > 0, got {r}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn initial_point(&self, d: usize) -> Result<Vector> {
        let x = match &self.init {
            Init::Zero => Vector::zeros(d),
            Init::Given(v) if v.len() == d => v.clone(),
            Init::Given(v) => return Err(Error::shape("InnerConfig::init", d, v.len())),
        };
        Ok(project(x, self.project_radius))
    }
}

pub(crate) fn project(mut x: Vector, radius: Option<f64>) -> Vector {
    if let Some(r) = radius {
        let nx = x.norm();
        if nx > r {
            x.iter_mut().for_each(|v| *v *= r / nx);
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x_star: Vector,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub steps_taken: usize,
    /// Objective at every iterate, starting with the initial point.
    pub loss_trace: Vec<f64>,
}

impl SolveResult {
    /// Whether `loss_trace` is nonincreasing up to `1e-12` of rounding slack per step.
    pub fn is_monotone(&self) -> bool {
        self.is_monotone_within(1e-12)
    }

    pub fn is_monotone_within(&self, slack: f64) -> bool {
        self.loss_trace.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

/// One summand `weight * L(x, a, b)` of an inner objective.
#[derive(Debug, Clone, Copy)]
pub struct Term<'a> {
    pub weight: f64,
    pub a: &'a Matrix,
    pub b: &'a [f64],
}

pub(crate) fn objective(terms: &[Term<'_>], x: &[f64]) -> (f64, Vector) {
    let mut loss = 0.0;
    let mut grad = Vector::zeros(x.len());
    for t in terms {
        if t.weight == 0.0 {
            continue;
        }
        let (l, g) = sr_loss_and_gradient(t.a, t.b, x);
        loss += t.weight * l;
        grad.axpy(t.weight, &g);
    }
    (loss, grad)
}

/// Iterates `x_0, ..., x_K` of a descent run, kept for differentiation.
#[derive(Debug, Clone)]
pub(crate) struct Trajectory {
    pub iterates: Vec<Vector>,
    /// Pre-projection points `x_k - eta * grad_k`, one per step.
    pub unprojected: Vec<Vector>,
}

pub(crate) fn descend(
    terms: &[Term<'_>],
    d: usize,
    cfg: &InnerConfig,
    record: bool,
) -> Result<(SolveResult, Option<Trajectory>)> {
    cfg.validate()?;
    let mut x = cfg.initial_point(d)?;
    let mut traj = record.then(|| Trajectory {
        iterates: vec![x.clone()],
        unprojected: Vec::new(),
    });
    let mut loss_trace = Vec::new();
    let mut steps = 0;
    let (mut loss, mut grad) = objective(terms, &x);
    loop {
        loss_trace.push(loss);
        if grad.norm() <= cfg.grad_tol || steps == cfg.max_steps || !loss.is_finite() {
            break;
        }
        let mut y = x.clone();
        y.axpy(-cfg.step_size, &grad);
        x = project(y.clone(), cfg.project_radius);
        if let Some(t) = traj.as_mut() {
            t.unprojected.push(y);
            t.iterates.push(x.clone());
        }
        steps += 1;
        (loss, grad) = objective(terms, &x);
    }
    Ok((
        SolveResult {
            final_grad_norm: grad.norm(),
            final_loss: loss,
            x_star: x,
            steps_taken: steps,
            loss_trace,
        },
        traj,
    ))
}

/// Gradient descent on `sum_i w_i * 0.5 ||f(A_i x) - b_i||^2`.
pub fn solve_weighted_softmax(
    examples: &[Example],
    w: &[f64],
    cfg: &InnerConfig,
) -> Result<SolveResult> {
    let (_, d) = common_shape(examples)?;
    if w.len() != examples.len() {
        return Err(Error::shape(
            "solve_weighted_softmax weights",
            examples.len(),
            w.len(),
        ));
    }
    let terms: Vec<Term<'_>> = examples
        .iter()
        .zip(w)
        .map(|(e, wi)| Term {
            weight: *wi,
            a: &e.a,
            b: &e.b,
        })
        .collect();
    Ok(descend(&terms, d, cfg, false)?.0)
}

/// `f(A_query x*)`
pub fn icl_predict(a_query: &Matrix, x_star: &[f64]) -> Result<Vector> {
    if a_query.cols() != x_star.len() {
        return Err(Error::shape("icl_predict", a_query.cols(), x_star.len()));
    }
    Ok(softmax_predict(a_query, x_star))
}

/// Regularization of the aggregate least-squares system.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    /// Singular systems are an error.
    #[default]
    Off,
    Fixed(f64),
    /// Retry a singular system with ridge `1e-8 * trace(A^T A) / d`.
    Fallback,
}

/// `A = (1/m) sum_i diag(w_a_i) A_i` and `b = (1/m) sum_i w_b_i b_i`, with
/// `w_full` laid out as `[w_a_1 (n), w_b_1, ..., w_a_m (n), w_b_m]`.
pub fn weighted_aggregate(examples: &[Example], w_full: &[f64]) -> Result<(Matrix, Vector)> {
    let (n, d) = common_shape(examples)?;
    let m = examples.len();
    if w_full.len() != m * (n + 1) {
        return Err(Error::shape(
            "weighted_aggregate",
            m * (n + 1),
            w_full.len(),
        ));
    }
    let inv_m = 1.0 / m as f64;
    let mut agg_a = Matrix::zeros(n, d);
    let mut agg_b = Vector::zeros(n);
    for (i, e) in examples.iter().enumerate() {
        let block = &w_full[i * (n + 1)..(i + 1) * (n + 1)];
        for j in 0..n {
            let s = block[j] * inv_m;
            for (o, v) in agg_a.row_mut(j).iter_mut().zip(e.a.row(j)) {
                *o += s * v;
            }
        }
        agg_b.axpy(block[n] * inv_m, &e.b);
    }
    Ok((agg_a, agg_b))
}

/// Solution of the aggregate system plus what is needed to differentiate it.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub x: Vector,
    pub agg_a: Matrix,
    pub agg_b: Vector,
    pub ridge: f64,
    pub factor: NormalFactor,
}

pub(crate) fn solve_aggregate(
    agg_a: Matrix,
    agg_b: Vector,
    ridge: Ridge,
) -> Result<LinearSolution> {
    let attempt = |r: f64| least_squares_factored(&agg_a, &agg_b, r);
    let (x, factor, used) = match ridge {
        Ridge::Off => {
            let (x, f) = attempt(0.0)?;
            (x, f, 0.0)
        }
        Ridge::Fixed(r) => {
            let (x, f) = attempt(r)?;
            (x, f, r)
        }
        Ridge::Fallback => match attempt(0.0) {
            Ok((x, f)) => (x, f, 0.0),
            Err(Error::SingularSystem(_)) => {
                let d = agg_a.cols().max(1) as f64;
                let r = 1e-8 * agg_a.frobenius_norm_sq() / d;
                if r == 0.0 {
                    return Err(Error::SingularSystem(
                        "aggregate input is identically zero".into(),
                    ));
                }
                let (x, f) = attempt(r)?;
                (x, f, r)
            }
            Err(e) => return Err(e),
        },
    };
    Ok(LinearSolution {
        x,
        agg_a,
        agg_b,
        ridge: used,
        factor,
    })
}

/// Closed-form weighted linear in-context solution `(A^T A)^-1 A^T b`.
pub fn solve_weighted_linear(examples: &[Example], w_full: &[f64], ridge: Ridge) -> Result<Vector> {
    Ok(solve_weighted_linear_full(examples, w_full, ridge)?.x)
}

pub fn solve_weighted_linear_full(
    examples: &[Example],
    w_full: &[f64],
    ridge: Ridge,
) -> Result<LinearSolution> {
    let (agg_a, agg_b) = weighted_aggregate(examples, w_full)?;
    solve_aggregate(agg_a, agg_b, ridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::softmax::sr_loss;

    fn random_examples(m: usize, n: usize, d: usize, seed: u64) -> Vec<Example> {
        let mut s = RngStream::new(seed, 0).sampler();
        (0..m)
            .map(|_| {
                let a = s.gauss_matrix(n, d);
                let b = crate::softmax::softmax(&s.gauss_vector(n));
                Example::new(a, b).unwrap()
            })
            .collect()
    }

    #[test]
    fn already_optimal_start_is_returned() {
        let mut s = RngStream::new(5, 0).sampler();
        let a = s.gauss_matrix(3, 3);
        let x0 = s.gauss_vector(3);
        let b = softmax_predict(&a, &x0);
        let ex = vec![Example::new(a, b).unwrap()];
        let cfg = InnerConfig {
            init: Init::Given(x0.clone()),
            ..InnerConfig::default()
        };
        let res = solve_weighted_softmax(&ex, &[1.0], &cfg).unwrap();
        assert_eq!(res.x_star, x0);
        assert_eq!(res.final_grad_norm, 0.0);
        assert_eq!(res.steps_taken, 0);
    }

    #[test]
    fn zero_weights_return_init() {
        let ex = random_examples(3, 2, 2, 1);
        let x0 = Vector::new(vec![0.3, -0.2]);
        let cfg = InnerConfig {
            init: Init::Given(x0.clone()),
            ..InnerConfig::default()
        };
        let res = solve_weighted_softmax(&ex, &[0.0; 3], &cfg).unwrap();
        assert_eq!(res.x_star, x0);
        assert_eq!(res.steps_taken, 0);
    }

    #[test]
    fn descent_reaches_tolerance_and_beats_grid() {
        let ex = random_examples(3, 2, 2, 11);
        let w = [1.0, 1.0, 1.0];
        let cfg = InnerConfig {
            max_steps: 100_000,
            step_size: 0.5,
            grad_tol: 1e-9,
            ..InnerConfig::default()
        };
        let res = solve_weighted_softmax(&ex, &w, &cfg).unwrap();
        assert!(res.final_loss <= res.loss_trace[0]);
        assert!(res.final_grad_norm <= cfg.grad_tol);
        assert!(res.is_monotone());

        // 41x41 grid over the disc ||x|| <= R with R covering the solution.
        let radius = res.x_star.norm().max(1.0) * 1.5;
        let obj = |x: &[f64]| -> f64 { ex.iter().map(|e| sr_loss(&e.a, &e.b, x)).sum() };
        let mut best = f64::INFINITY;
        for i in 0..41 {
            for j in 0..41 {
                let p = [
                    -radius + 2.0 * radius * i as f64 / 40.0,
                    -radius + 2.0 * radius * j as f64 / 40.0,
                ];
                if p[0].hypot(p[1]) <= radius {
                    best = best.min(obj(&p));
                }
            }
        }
        assert!(
            res.final_loss <= best + 1e-12,
            "{} vs grid {}",
            res.final_loss,
            best
        );
    }

    #[test]
    fn projection_keeps_iterates_in_ball() {
        let ex = random_examples(4, 3, 3, 2);
        let cfg = InnerConfig {
            project_radius: Some(0.1),
            max_steps: 50,
            ..InnerConfig::default()
        };
        let res = solve_weighted_softmax(&ex, &[5.0; 4], &cfg).unwrap();
        assert!(res.x_star.norm() <= 0.1 + 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let ex = random_examples(2, 3, 3, 3);
        assert!(matches!(
            solve_weighted_softmax(&ex, &[1.0], &InnerConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(icl_predict(&Matrix::zeros(2, 3), &[1.0]).is_err());
    }

    #[test]
    fn icl_predict_uniform_for_zero_query() {
        let p = icl_predict(&Matrix::zeros(5, 2), &[1.0, 2.0]).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn linear_recovers_planted_solution() {
        let mut s = RngStream::new(8, 0).sampler();
        let a = s.gauss_matrix(4, 4);
        let x_true = s.gauss_vector(4);
        let b = a.matvec(&x_true);
        let ex = vec![Example::new(a, b).unwrap()];
        let x = solve_weighted_linear(&ex, &[1.0; 5], Ridge::Off).unwrap();
        for (u, v) in x.iter().zip(x_true.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_zero_input_weights_is_singular() {
        let ex = random_examples(2, 3, 3, 4);
        let mut w = vec![0.0; 8];
        w[3] = 1.0;
        w[7] = 1.0;
        assert!(matches!(
            solve_weighted_linear(&ex, &w, Ridge::Off),
            Err(Error::SingularSystem(_))
        ));
        assert!(matches!(
            solve_weighted_linear(&ex, &w, Ridge::Fallback),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn linear_average_symmetry() {
        let e = random_examples(1, 3, 3, 6).remove(0);
        let ex = vec![e.clone(), e];
        let mut w1 = vec![1.0; 8];
        w1[3] = 2.0;
        w1[7] = 0.0;
        let w2 = vec![1.0; 8];
        let x1 = solve_weighted_linear(&ex, &w1, Ridge::Off).unwrap();
        let x2 = solve_weighted_linear(&ex, &w2, Ridge::Off).unwrap();
        for (u, v) in x1.iter().zip(x2.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn fallback_ridge_handles_rank_deficiency() {
        // rank-one aggregate
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let ex = vec![Example::new(a, Vector::new(vec![1.0, 2.0])).unwrap()];
        assert!(solve_weighted_linear(&ex, &[1.0; 3], Ridge::Off).is_err());
        let sol = solve_weighted_linear_full(&ex, &[1.0; 3], Ridge::Fallback).unwrap();
        assert!(sol.ridge > 0.0);
        let resid = sol.agg_a.matvec(&sol.x).sub(&sol.agg_b).norm();
        assert!(resid < 1e-6, "{resid}");
    }
}
