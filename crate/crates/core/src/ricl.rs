//! Outer loop that learns prefix weights by descending the validation loss.
//!
//! Both modes reduce to one inner objective `sum_i s_i L(x, A~_i, b~_i)`:
//! scalar mode uses `s = w` on the raw examples, transformer mode uses
//! `s = 1` on the reweighted pairs (half of `transformer_loss`, so the
//! minimizer is the same).

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::inner::{common_shape, descend, objective, Example, InnerConfig, Term};
use crate::linalg::{Matrix, Vector};
use crate::reweight::{
    reg_gradient, reg_term, reweight_pairs, square_shape, RegConfig, RegForm, ReweightParams,
};
use crate::rng::RngStream;
use crate::softmax::{
    adjoint_partials, sr_gradient, sr_loss, sr_loss_and_gradient, theoretical_bounds,
};
use crate::trace::{TraceRow, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Scalar,
    Transformer,
}

/// Learned quantities: per-example scalars or the full `(w, B)` pair.
#[derive(Debug, Clone, PartialEq)]
pub enum RiclParams {
    Scalar(Vector),
    Transformer(ReweightParams),
}

impl RiclParams {
    pub fn mode(&self) -> Mode {
        match self {
            RiclParams::Scalar(_) => Mode::Scalar,
            RiclParams::Transformer(_) => Mode::Transformer,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            RiclParams::Scalar(w) => w.to_vec(),
            RiclParams::Transformer(p) => p.to_flat(),
        }
    }

    /// Rebuilds parameters of the same mode and shape as `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<RiclParams> {
        match self {
            RiclParams::Scalar(w) => {
                if flat.len() != w.len() {
                    return Err(Error::shape("RiclParams::with_flat", w.len(), flat.len()));
                }
                Ok(RiclParams::Scalar(Vector::from_slice(flat)))
            }
            RiclParams::Transformer(p) => Ok(RiclParams::Transformer(ReweightParams::from_flat(
                flat,
                p.num_examples(),
                p.n(),
            )?)),
        }
    }
}

/// The inner problem as seen by the outer loop.
struct Effective<'a> {
    weights: Vec<f64>,
    data: Cow<'a, [Example]>,
}

impl Effective<'_> {
    fn terms(&self) -> Vec<Term<'_>> {
        self.data
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| Term {
                weight: *w,
                a: &e.a,
                b: &e.b,
            })
            .collect()
    }
}

fn effective<'a>(params: &RiclParams, examples: &'a [Example]) -> Result<Effective<'a>> {
    match params {
        RiclParams::Scalar(w) => {
            common_shape(examples)?;
            if w.len() != examples.len() {
                return Err(Error::shape("scalar weights", examples.len(), w.len()));
            }
            Ok(Effective {
                weights: w.to_vec(),
                data: Cow::Borrowed(examples),
            })
        }
        RiclParams::Transformer(p) => Ok(Effective {
            weights: vec![1.0; examples.len()],
            data: Cow::Owned(reweight_pairs(examples, p)?),
        }),
    }
}

fn batch_loss(batch: &[Example], x: &[f64]) -> f64 {
    batch.iter().map(|v| sr_loss(&v.a, &v.b, x)).sum()
}

fn batch_loss_and_gradient(batch: &[Example], x: &[f64]) -> (f64, Vector) {
    let mut loss = 0.0;
    let mut grad = Vector::zeros(x.len());
    for v in batch {
        let (l, g) = sr_loss_and_gradient(&v.a, &v.b, x);
        loss += l;
        grad.axpy(1.0, &g);
    }
    (loss, grad)
}

fn check_valset(valset: &[Example], d: usize) -> Result<()> {
    let (_, dv) = common_shape(valset)?;
    if dv != d {
        return Err(Error::shape("validation inputs", d, dv));
    }
    Ok(())
}

/// Solves the inner problem for `params` from the configured start and
/// returns its minimizer.
pub fn inner_solution(
    params: &RiclParams,
    examples: &[Example],
    inner: &InnerConfig,
) -> Result<Vector> {
    let eff = effective(params, examples)?;
    let (_, d) = common_shape(&eff.data)?;
    Ok(descend(&eff.terms(), d, inner, false)?.0.x_star)
}

/// `sum_v L(x*, A_v, b_v)` with `x*` the inner solution for `params`.
pub fn validation_loss(
    params: &RiclParams,
    examples: &[Example],
    valset: &[Example],
    inner: &InnerConfig,
) -> Result<f64> {
    let eff = effective(params, examples)?;
    let (_, d) = common_shape(&eff.data)?;
    check_valset(valset, d)?;
    let res = descend(&eff.terms(), d, inner, false)?.0;
    if !res.final_loss.is_finite() || !res.x_star.is_finite() {
        // The inner run blew up; report it instead of scoring its last iterate.
        return Ok(f64::NAN);
    }
    Ok(batch_loss(valset, &res.x_star))
}

/// How the derivative through the inner argmin is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaMethod {
    /// Differentiates `L_batch(x_t - eta sum_i s_i grad L_i(x_t))` with
    /// `x_t` the inner solution held fixed.
    OneStepLookahead { eta: f64 },
    /// Reverse mode through the last `steps` recorded inner iterations;
    /// exact for the whole pipeline once `steps` covers the run.
    Unrolled { steps: usize },
    /// Central differences of the chosen surrogate.
    FiniteDifference { h: f64, of: Surrogate },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surrogate {
    Lookahead {
        eta: f64,
    },
    /// The full pipeline `L_batch(x*(params))`.
    Pipeline,
}

impl MetaMethod {
    fn validate(&self) -> Result<()> {
        let bad = match *self {
            MetaMethod::OneStepLookahead { eta } => !(eta >= 0.0) || !eta.is_finite(),
            MetaMethod::Unrolled { .. } => false,
            MetaMethod::FiniteDifference { h, of } => {
                !(h > 0.0)
                    || matches!(of, Surrogate::Lookahead { eta } if !(eta >= 0.0) || !eta.is_finite())
            }
        };
        if bad {
            return Err(Error::InvalidConfig(format!(
                "invalid meta-gradient parameters: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Derivatives of the batch loss with respect to the effective inner data.
struct DataGrad {
    ds: Vec<f64>,
    da: Vec<Matrix>,
    db: Vec<Vector>,
}

impl DataGrad {
    fn zeros(eff: &Effective<'_>) -> Self {
        DataGrad {
            ds: vec![0.0; eff.data.len()],
            da: eff
                .data
                .iter()
                .map(|e| Matrix::zeros(e.a.rows(), e.a.cols()))
                .collect(),
            db: eff.data.iter().map(|e| Vector::zeros(e.b.len())).collect(),
        }
    }

    /// Adds `-step * d/d(data) <nu, sum_i s_i grad L_i(x)>` and returns
    /// `sum_i s_i H_i(x) nu`.
    fn accumulate_step(
        &mut self,
        eff: &Effective<'_>,
        x: &[f64],
        nu: &[f64],
        step: f64,
        want_data: bool,
    ) -> Vector {
        let mut hv = Vector::zeros(x.len());
        for (i, e) in eff.data.iter().enumerate() {
            let s = eff.weights[i];
            let g = sr_gradient(&e.a, &e.b, x);
            self.ds[i] -= step * g.dot(nu);
            if s == 0.0 && !want_data {
                continue;
            }
            let parts = adjoint_partials(&e.a, &e.b, x, nu);
            hv.axpy(s, &parts.wrt_x);
            if want_data {
                self.da[i].axpy(-step * s, &parts.wrt_a);
                self.db[i].axpy(-step * s, &parts.wrt_b);
            }
        }
        hv
    }
}

/// Maps data derivatives back onto the learned parameters.
fn pullback(params: &RiclParams, examples: &[Example], dg: DataGrad) -> RiclParams {
    match params {
        RiclParams::Scalar(_) => RiclParams::Scalar(Vector::new(dg.ds)),
        RiclParams::Transformer(p) => {
            let n = p.n();
            let m = p.num_examples();
            let mut grad = ReweightParams {
                w: Vector::zeros(m * (n + 1)),
                bias: Matrix::zeros(m * (n + 1), n),
            };
            for (i, e) in examples.iter().enumerate() {
                let base = i * (n + 1);
                for r in 0..n {
                    let ga = dg.da[i].row(r);
                    grad.w[base + r] = ga.iter().zip(e.a.row(r)).map(|(g, a)| g * a).sum();
                    grad.bias.row_mut(base + r).copy_from_slice(ga);
                }
                grad.w[base + n] = dg.db[i].dot(&e.b);
                grad.bias.row_mut(base + n).copy_from_slice(&dg.db[i]);
            }
            RiclParams::Transformer(grad)
        }
    }
}

fn lookahead_loss(eff: &Effective<'_>, x_t: &[f64], eta: f64, batch: &[Example]) -> f64 {
    let (_, g) = objective(&eff.terms(), x_t);
    let mut x_plus = Vector::from_slice(x_t);
    x_plus.axpy(-eta, &g);
    batch_loss(batch, &x_plus)
}

/// Gradient of the batch validation loss with respect to `params`.
pub fn meta_gradient(
    params: &RiclParams,
    examples: &[Example],
    batch: &[Example],
    inner: &InnerConfig,
    method: MetaMethod,
) -> Result<RiclParams> {
    method.validate()?;
    let eff = effective(params, examples)?;
    let (_, d) = common_shape(&eff.data)?;
    check_valset(batch, d)?;
    let want_data = params.mode() == Mode::Transformer;
    match method {
        MetaMethod::OneStepLookahead { eta } => {
            let x_t = descend(&eff.terms(), d, inner, false)?.0.x_star;
            let (_, g) = objective(&eff.terms(), &x_t);
            let mut x_plus = x_t.clone();
            x_plus.axpy(-eta, &g);
            let (_, lambda) = batch_loss_and_gradient(batch, &x_plus);
            let mut dg = DataGrad::zeros(&eff);
            dg.accumulate_step(&eff, &x_t, &lambda, eta, want_data);
            Ok(pullback(params, examples, dg))
        }
        MetaMethod::Unrolled { steps } => {
            let (res, traj) = descend(&eff.terms(), d, inner, true)?;
            let traj = traj.expect("trajectory was requested");
            let (_, mut mu) = batch_loss_and_gradient(batch, &res.x_star);
            let mut dg = DataGrad::zeros(&eff);
            let n_steps = res.steps_taken;
            for k in (n_steps.saturating_sub(steps)..n_steps).rev() {
                let nu = projection_vjp(&traj.unprojected[k], inner.project_radius, &mu);
                let hv =
                    dg.accumulate_step(&eff, &traj.iterates[k], &nu, inner.step_size, want_data);
                mu = nu;
                mu.axpy(-inner.step_size, &hv);
            }
            Ok(pullback(params, examples, dg))
        }
        MetaMethod::FiniteDifference { h, of } => {
            let flat = params.to_flat();
            let surrogate: Box<dyn Fn(&RiclParams) -> Result<f64>> = match of {
                Surrogate::Lookahead { eta } => {
                    let x_t = descend(&eff.terms(), d, inner, false)?.0.x_star;
                    Box::new(move |p: &RiclParams| {
                        let e = effective(p, examples)?;
                        Ok(lookahead_loss(&e, &x_t, eta, batch))
                    })
                }
                Surrogate::Pipeline => {
                    Box::new(|p: &RiclParams| validation_loss(p, examples, batch, inner))
                }
            };
            let mut grad = vec![0.0; flat.len()];
            let mut probe = flat.clone();
            for k in 0..flat.len() {
                probe[k] = flat[k] + h;
                let up = surrogate(&params.with_flat(&probe)?)?;
                probe[k] = flat[k] - h;
                let dn = surrogate(&params.with_flat(&probe)?)?;
                probe[k] = flat[k];
                grad[k] = (up - dn) / (2.0 * h);
            }
            params.with_flat(&grad)
        }
    }
}

/// Transposed Jacobian of the ball projection at the pre-projection point.
fn projection_vjp(y: &[f64], radius: Option<f64>, v: &[f64]) -> Vector {
    match radius {
        Some(r) => {
            let ny = crate::linalg::norm(y);
            if ny <= r {
                return Vector::from_slice(v);
            }
            let yv = crate::linalg::dot(y, v) / (ny * ny);
            Vector::new(
                y.iter()
                    .zip(v)
                    .map(|(yi, vi)| (r / ny) * (vi - yv * yi))
                    .collect(),
            )
        }
        None => Vector::from_slice(v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// `w = 1`, `B = 0`.
    Ones,
    /// `w ~ N(0, I)`, `B = 0`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightProjection {
    #[default]
    None,
    NonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Always step by `outer_lr`.
    Fixed,
    /// Start at `outer_lr` and halve until the outer objective does not
    /// rise; after `max_halvings` failures the step is skipped.
    Backtracking { max_halvings: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiclConfig {
    pub mode: Mode,
    pub outer_steps: usize,
    pub outer_lr: f64,
    pub inner: InnerConfig,
    /// Validation minibatch size; `None` uses the whole set.
    pub batch_size: Option<usize>,
    pub reg: RegConfig,
    pub meta_method: MetaMethod,
    pub weight_projection: WeightProjection,
    pub init: WeightInit,
    pub step_rule: StepRule,
    pub seed: u64,
}

impl RiclConfig {
    /// Defaults for `mode`: scalar mode starts at `w = 1`, transformer mode
    /// draws `w ~ N(0, I)`.
    pub fn new(mode: Mode) -> Self {
        RiclConfig {
            mode,
            outer_steps: 100,
            outer_lr: 1.0,
            inner: InnerConfig::default(),
            batch_size: None,
            reg: RegConfig::default(),
            meta_method: MetaMethod::OneStepLookahead { eta: 1.0 },
            weight_projection: WeightProjection::None,
            init: match mode {
                Mode::Scalar => WeightInit::Ones,
                Mode::Transformer => WeightInit::Gaussian,
            },
            step_rule: StepRule::Backtracking { max_halvings: 30 },
            seed: 0,
        }
    }

    pub fn validate(&self, valset_len: usize) -> Result<()> {
        self.inner.validate()?;
        self.meta_method.validate()?;
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "outer_lr must be > 0, got {}",
                self.outer_lr
            )));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > valset_len {
                return Err(Error::InvalidConfig(format!(
                    "batch_size must be in 1..={valset_len}, got {b}"
                )));
            }
        }
        if !(self.reg.gamma >= 0.0) || !self.reg.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be >= 0, got {}",
                self.reg.gamma
            )));
        }
        Ok(())
    }
}

/// Smallest `w_b` kept when the printed penalty needs `sqrt(w_b)`.
const W_B_FLOOR: f64 = 1e-8;

fn initial_params(cfg: &RiclConfig, examples: &[Example]) -> Result<RiclParams> {
    let mut sampler = RngStream::new(cfg.seed, 0).child(0x1a17).sampler();
    Ok(match cfg.mode {
        Mode::Scalar => {
            common_shape(examples)?;
            RiclParams::Scalar(match cfg.init {
                WeightInit::Ones => Vector::ones(examples.len()),
                WeightInit::Gaussian => sampler.gauss_vector(examples.len()),
            })
        }
        Mode::Transformer => {
            let n = square_shape(examples)?;
            let mut p = ReweightParams::identity(examples.len(), n);
            if cfg.init == WeightInit::Gaussian {
                p.w = sampler.gauss_vector(p.w.len());
            }
            RiclParams::Transformer(p)
        }
    })
}

fn project_params(params: &mut RiclParams, cfg: &RiclConfig) {
    let nonneg = cfg.weight_projection == WeightProjection::NonNegative;
    match params {
        RiclParams::Scalar(w) => {
            if nonneg {
                w.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        RiclParams::Transformer(p) => {
            if nonneg {
                p.w.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if cfg.reg.form == RegForm::Printed && cfg.reg.gamma > 0.0 {
                let n = p.n();
                for i in 0..p.num_examples() {
                    let k = i * (n + 1) + n;
                    p.w[k] = p.w[k].max(W_B_FLOOR);
                }
            }
        }
    }
}

/// Validation loss plus, in transformer mode, the regularizer.
pub fn outer_objective(
    params: &RiclParams,
    examples: &[Example],
    valset: &[Example],
    inner: &InnerConfig,
    reg: &RegConfig,
) -> Result<f64> {
    let mut value = validation_loss(params, examples, valset, inner)?;
    if let RiclParams::Transformer(p) = params {
        value += reg_term(p, examples, reg)?;
    }
    Ok(value)
}

fn full_gradient(
    params: &RiclParams,
    examples: &[Example],
    batch: &[Example],
    cfg: &RiclConfig,
) -> Result<Vec<f64>> {
    let mut g = meta_gradient(params, examples, batch, &cfg.inner, cfg.meta_method)?.to_flat();
    if let RiclParams::Transformer(p) = params {
        let rg = reg_gradient(p, examples, &cfg.reg)?.to_flat();
        g.iter_mut().zip(rg).for_each(|(a, b)| *a += b);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiclOutcome {
    pub params: RiclParams,
    pub trace: TrainTrace,
}

/// Runs `outer_steps` descent steps on the outer objective. The trace has
/// one row per visited iterate, including the last.
pub fn ricl_train(
    examples: &[Example],
    valset: &[Example],
    cfg: &RiclConfig,
) -> Result<RiclOutcome> {
    cfg.validate(valset.len())?;
    let mut params = initial_params(cfg, examples)?;
    project_params(&mut params, cfg);
    check_valset(valset, common_shape(examples)?.1)?;

    let batch_size = cfg.batch_size.unwrap_or(valset.len());
    let order = if batch_size < valset.len() {
        RngStream::new(cfg.seed, 0)
            .child(0xba7c)
            .sampler()
            .permutation(valset.len())
    } else {
        (0..valset.len()).collect()
    };
    let mut cursor = 0;
    let mut next_batch = || -> Vec<Example> {
        (0..batch_size)
            .map(|_| {
                let v = valset[order[cursor]].clone();
                cursor = (cursor + 1) % order.len();
                v
            })
            .collect()
    };

    let objective_at = |p: &RiclParams| outer_objective(p, examples, valset, &cfg.inner, &cfg.reg);
    let mut current = objective_at(&params)?;
    if !current.is_finite() {
        return Err(Error::DivergenceDetected { step: 0 });
    }
    let mut rows = Vec::with_capacity(cfg.outer_steps + 1);
    for t in 0..=cfg.outer_steps {
        let batch = if batch_size == valset.len() {
            valset.to_vec()
        } else {
            next_batch()
        };
        let grad = full_gradient(&params, examples, &batch, cfg)?;
        let grad_norm_sq: f64 = grad.iter().map(|g| g * g).sum();
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
        let flat = params.to_flat();
        let candidate = |alpha: f64| -> Result<RiclParams> {
            let moved: Vec<f64> = flat.iter().zip(&grad).map(|(p, g)| p - alpha * g).collect();
            let mut next = params.with_flat(&moved)?;
            project_params(&mut next, cfg);
            Ok(next)
        };
        match cfg.step_rule {
            StepRule::Fixed => {
                let next = candidate(cfg.outer_lr)?;
                let value = objective_at(&next)?;
                if !value.is_finite() {
                    return Err(Error::DivergenceDetected { step: t + 1 });
                }
                row.step_size = cfg.outer_lr;
                params = next;
                current = value;
            }
            StepRule::Backtracking { max_halvings } => {
                if grad_norm_sq > 0.0 {
                    let mut alpha = cfg.outer_lr;
                    for _ in 0..=max_halvings {
                        let next = candidate(alpha)?;
                        let value = objective_at(&next)?;
                        if value <= current {
                            row.step_size = alpha;
                            params = next;
                            current = value;
                            break;
                        }
                        alpha *= 0.5;
                    }
                }
            }
        }
        rows.push(row);
    }
    Ok(RiclOutcome {
        params,
        trace: TrainTrace { rows },
    })
}

/// `ln(2 |B|) - ln L - 2 ln sigma` with `L = d n^2 exp(5 R^2)` and
/// `sigma = 4R`: the log of the largest step the descent lemma allows.
pub fn lr_rule(n: usize, d: usize, radius: f64, batch_size: usize) -> Result<f64> {
    let bounds = theoretical_bounds(n, d, radius)?;
    if batch_size == 0 {
        return Err(Error::PreconditionViolation(
            "batch_size must be >= 1".into(),
        ));
    }
    Ok((2.0 * batch_size as f64).ln() - bounds.log_lipschitz - 2.0 * bounds.grad_bound.ln())
}
