//! Named runtime checks of the library's invariants.
//!
//! Every property has a unique dotted name `module.property`. The suite is a
//! pure function of the seed and the preset sizes.

use std::cell::OnceCell;

use crate::bench::{
    mean_mse, minmax_scale, run_benchmark, write_bench_csv, BenchConfig, BenchRow, Method,
};
use crate::datagen::{
    gen_eval_set, gen_examples, gen_task, generate_dataset, PrefixKind, Preset, Sizes,
};
use crate::dataset::dataset_to_string;
use crate::error::{Error, Result};
use crate::inner::{
    solve_weighted_linear, solve_weighted_linear_full, solve_weighted_softmax, Example,
    InnerConfig, Ridge,
};
use crate::laricl::{laricl_grad, laricl_train, laricl_train_observed, LariclConfig, LariclGrad};
use crate::linalg::{
    frobenius_objective, least_squares, operator_norm, vectorized_objective, Matrix, Vector,
};
use crate::reweight::{
    apply_reweight, assemble_prefix, lift_scalar_weights, lift_scalar_weights_at, reg_term,
    transformer_loss, RegConfig, RegForm, ReweightParams,
};
use crate::ricl::{
    inner_solution, lr_rule, meta_gradient, ricl_train, MetaMethod, Mode, RiclConfig, RiclParams,
    Surrogate,
};
use crate::rng::{gauss_matrix, RngStream, Sampler};
use crate::softmax::{softmax_predict, sr_gradient, sr_loss, theoretical_bounds};

/// Norm budget used by the bound checks.
const RADIUS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

/// Inputs shared by every check.
pub struct Context {
    seed: u64,
    sizes: Sizes,
    preset: Preset,
    bench: OnceCell<std::result::Result<Vec<BenchRow>, Error>>,
}

impl Context {
    pub fn new(preset: Preset, seed: u64) -> Self {
        Context {
            seed,
            sizes: preset.sizes(),
            preset,
            bench: OnceCell::new(),
        }
    }

    /// A sampler private to one check.
    fn sampler(&self, tag: u64) -> Sampler {
        RngStream::new(self.seed, 0x7e51).child(tag).sampler()
    }

    fn bench_rows(&self) -> Result<&[BenchRow]> {
        self.bench
            .get_or_init(|| run_benchmark(&BenchConfig::for_preset(self.preset, self.seed), 1))
            .as_ref()
            .map(Vec::as_slice)
            .map_err(Clone::clone)
    }
}

type CheckFn = fn(&Context) -> Result<Verdict>;

const PROPERTIES: &[(&str, CheckFn)] = &[
    ("linalg.vec_kron_identity", linalg_vec_kron_identity),
    (
        "linalg.lstsq_residual_orthogonal",
        linalg_lstsq_residual_orthogonal,
    ),
    (
        "linalg.gauss_bit_reproducible",
        linalg_gauss_bit_reproducible,
    ),
    ("softmax.normalization", softmax_normalization),
    ("softmax.gradient_matches_fd", softmax_gradient_matches_fd),
    ("softmax.gradient_bound", softmax_gradient_bound),
    ("softmax.residual_bound", softmax_residual_bound),
    ("softmax.lipschitz_log_space", softmax_lipschitz_log_space),
    (
        "inner.stationary_on_early_exit",
        inner_stationary_on_early_exit,
    ),
    ("inner.weight_scaling", inner_weight_scaling),
    (
        "inner.linear_consistent_residual",
        inner_linear_consistent_residual,
    ),
    (
        "reweight.single_pair_lift_equality",
        reweight_single_pair_lift_equality,
    ),
    (
        "reweight.multi_pair_lift_equality",
        reweight_multi_pair_lift_equality,
    ),
    ("reweight.affine_in_bias", reweight_affine_in_bias),
    ("reweight.reg_zero_iff_lift", reweight_reg_zero_iff_lift),
    ("ricl.monotone_descent", ricl_monotone_descent),
    ("ricl.stationarity", ricl_stationarity),
    ("ricl.lookahead_matches_fd", ricl_lookahead_matches_fd),
    ("ricl.lr_rule_monotone", ricl_lr_rule_monotone),
    ("laricl.gradient_matches_fd", laricl_gradient_matches_fd),
    ("laricl.monotone_trace", laricl_monotone_trace),
    ("laricl.normal_equations", laricl_normal_equations),
    ("datagen.noiseless_in_simplex", datagen_noiseless_in_simplex),
    ("datagen.deterministic_bytes", datagen_deterministic_bytes),
    ("datagen.noiseless_norm_bound", datagen_noiseless_norm_bound),
    ("bench.minmax_keeps_extremes", bench_minmax_keeps_extremes),
    ("bench.csv_reproducible", bench_csv_reproducible),
    ("bench.oracle_is_floor", bench_oracle_is_floor),
];

/// Names of every property, in suite order.
pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|(n, _)| *n).collect()
}

/// Runs one property by name. An internal error counts as a failure.
pub fn run_property(ctx: &Context, name: &str) -> Option<CheckResult> {
    let (name, check) = PROPERTIES.iter().find(|(n, _)| *n == name)?;
    Some(match check(ctx) {
        Ok(v) => CheckResult {
            name,
            passed: v.passed,
            detail: v.detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    })
}

/// Runs every property, reporting each result through `on_result` as it
/// completes.
pub fn run_suite(ctx: &Context, mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    PROPERTIES
        .iter()
        .filter_map(|(name, _)| run_property(ctx, name))
        .inspect(|r| on_result(r))
        .collect()
}

// ---- instance generators ----

fn uniform_in(s: &mut Sampler, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * s.uniform()
}

fn size_in(s: &mut Sampler, lo: usize, hi: usize) -> usize {
    lo + s.below(hi - lo + 1)
}

/// Gaussian matrix rescaled so its spectral norm is at most `radius`.
fn bounded_matrix(s: &mut Sampler, n: usize, d: usize, radius: f64) -> Matrix {
    let g = s.gauss_matrix(n, d);
    let norm = operator_norm(&g, 1e-12);
    let target = radius * s.uniform();
    if norm == 0.0 {
        g
    } else {
        g.scaled(target / norm)
    }
}

/// Random vector with norm at most `radius`.
fn bounded_vector(s: &mut Sampler, len: usize, radius: f64) -> Vector {
    let g = s.gauss_vector(len);
    let norm = g.norm();
    let target = radius * s.uniform();
    if norm == 0.0 {
        g
    } else {
        g.scaled(target / norm)
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Noisy softmax examples around `x_true`.
fn softmax_examples(
    s: &mut Sampler,
    count: usize,
    n: usize,
    d: usize,
    x_true: &[f64],
    noise: f64,
) -> Vec<Example> {
    (0..count)
        .map(|_| {
            let a = s.gauss_matrix(n, d);
            let mut b = softmax_predict(&a, x_true);
            b.iter_mut().for_each(|v| *v += noise * s.standard_normal());
            Example::new(a, b).expect("consistent shapes")
        })
        .collect()
}

/// Central differences of a scalar function.
fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vector {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let dn = f(&probe);
        probe[k] = x[k];
        g.push((up - dn) / (2.0 * h));
    }
    Vector::new(g)
}

// ---- linalg ----

fn linalg_vec_kron_identity(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(1);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let (p, q, r, t) = (
            size_in(&mut s, 1, 4),
            size_in(&mut s, 1, 4),
            size_in(&mut s, 1, 4),
            size_in(&mut s, 1, 4),
        );
        let a1 = s.gauss_matrix(p, q);
        let x = s.gauss_matrix(q, r);
        let a2 = s.gauss_matrix(t, r);
        let b = s.gauss_matrix(p, t);
        let f = frobenius_objective(&a1, &x, &a2, &b)?;
        let v = vectorized_objective(&a1, &x, &a2, &b)?;
        worst = worst.max((f - v).abs() / f.abs().max(f64::MIN_POSITIVE));
    }
    verdict(
        worst <= 1e-12,
        format!("max relative gap {worst:.3e} over 100 instances"),
    )
}

fn linalg_lstsq_residual_orthogonal(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(2);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let d = size_in(&mut s, 1, 4);
        let rows = size_in(&mut s, d + 1, 8);
        let a = s.gauss_matrix(rows, d);
        let b = s.gauss_vector(rows);
        let x = least_squares(&a, &b, 0.0)?;
        let normal = a.matvec_t(&a.matvec(&x).sub(&b)).norm();
        worst = worst.max(normal / (operator_norm(&a, 1e-14) * b.norm()));
    }
    verdict(
        worst <= 1e-8,
        format!("max scaled normal residual {worst:.3e}"),
    )
}

fn linalg_gauss_bit_reproducible(ctx: &Context) -> Result<Verdict> {
    let stream = RngStream::new(ctx.seed, 9);
    let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let first = gauss_matrix(5, 7, &stream);
    let same = bits(&first) == bits(&gauss_matrix(5, 7, &stream));
    let other = bits(&first) != bits(&gauss_matrix(5, 7, &RngStream::new(ctx.seed, 10)));
    verdict(
        same && other,
        format!("repeat identical: {same}, other stream differs: {other}"),
    )
}

// ---- softmax ----

fn softmax_normalization(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(3);
    let mut worst = 0.0_f64;
    let mut out_of_range = 0;
    for k in 0..300 {
        let scale = [0.1, 1.0, 10.0][k % 3];
        let (n, d) = (size_in(&mut s, 1, 8), size_in(&mut s, 1, 8));
        let f = softmax_predict(&s.gauss_matrix(n, d).scaled(scale), &s.gauss_vector(d));
        worst = worst.max((f.iter().sum::<f64>() - 1.0).abs());
        out_of_range += f.iter().filter(|v| !(**v > 0.0 && **v <= 1.0)).count();
    }
    verdict(
        worst <= 1e-12 && out_of_range == 0,
        format!("max |sum - 1| {worst:.3e}, entries outside (0,1]: {out_of_range}"),
    )
}

fn softmax_gradient_matches_fd(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(4);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let (n, d) = (size_in(&mut s, 1, 8), size_in(&mut s, 1, 8));
        let a = s.gauss_matrix(n, d);
        let b = s.gauss_vector(n);
        let x = bounded_vector(&mut s, d, 1.0);
        let g = sr_gradient(&a, &b, &x);
        let fd = central_difference(|z| sr_loss(&a, &b, z), &x, 1e-5);
        worst = worst.max(rel_diff(&g, &fd));
    }
    verdict(
        worst <= 1e-6,
        format!("max relative error {worst:.3e} over 100 instances"),
    )
}

/// Instances satisfying the bound preconditions: `||A|| <= R`, `||b|| <= 1`,
/// `||x|| <= R`.
fn bound_instances(ctx: &Context, tag: u64) -> Vec<(Matrix, Vector, Vector)> {
    let mut s = ctx.sampler(tag);
    (0..1000)
        .map(|_| {
            let (n, d) = (size_in(&mut s, 1, 8), size_in(&mut s, 1, 8));
            let a = bounded_matrix(&mut s, n, d, RADIUS);
            let b = bounded_vector(&mut s, n, 1.0);
            let x = bounded_vector(&mut s, d, RADIUS);
            (a, b, x)
        })
        .collect()
}

fn softmax_gradient_bound(ctx: &Context) -> Result<Verdict> {
    let bound = theoretical_bounds(1, 1, RADIUS)?.grad_bound;
    let mut worst = 0.0_f64;
    let mut violations = 0;
    for (a, b, x) in bound_instances(ctx, 5) {
        let g = sr_gradient(&a, &b, &x).norm();
        worst = worst.max(g);
        violations += usize::from(g > bound);
    }
    verdict(
        violations == 0,
        format!("max gradient norm {worst:.4} vs bound {bound}, violations {violations}"),
    )
}

fn softmax_residual_bound(ctx: &Context) -> Result<Verdict> {
    let bound = theoretical_bounds(1, 1, RADIUS)?.residual_bound;
    let mut worst = 0.0_f64;
    let mut violations = 0;
    for (a, b, x) in bound_instances(ctx, 5) {
        let r = softmax_predict(&a, &x).sub(&b).norm();
        worst = worst.max(r);
        violations += usize::from(r > bound);
    }
    verdict(
        violations == 0,
        format!("max residual {worst:.4} vs bound {bound}, violations {violations}"),
    )
}

fn softmax_lipschitz_log_space(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(6);
    let mut worst_margin = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..100 {
        let (n, d) = (size_in(&mut s, 1, 8), size_in(&mut s, 1, 8));
        let a = bounded_matrix(&mut s, n, d, RADIUS);
        let b = bounded_vector(&mut s, n, 1.0);
        let x = bounded_vector(&mut s, d, RADIUS);
        let y = bounded_vector(&mut s, d, RADIUS);
        let dx = x.sub(&y).norm();
        let dg = sr_gradient(&a, &b, &x).sub(&sr_gradient(&a, &b, &y)).norm();
        if dx == 0.0 || dg == 0.0 {
            continue;
        }
        let margin = theoretical_bounds(n, d, RADIUS)?.log_lipschitz - (dg.ln() - dx.ln());
        worst_margin = worst_margin.min(margin);
        violations += usize::from(margin < 0.0);
    }
    verdict(
        violations == 0,
        format!("smallest log margin {worst_margin:.3}, violations {violations}"),
    )
}

// ---- inner ----

fn weighted_grad(examples: &[Example], w: &[f64], x: &[f64]) -> Vector {
    let mut g = Vector::zeros(x.len());
    for (e, wi) in examples.iter().zip(w) {
        g.axpy(*wi, &sr_gradient(&e.a, &e.b, x));
    }
    g
}

fn weighted_loss(examples: &[Example], w: &[f64], x: &[f64]) -> f64 {
    examples
        .iter()
        .zip(w)
        .map(|(e, wi)| wi * sr_loss(&e.a, &e.b, x))
        .sum()
}

fn inner_stationary_on_early_exit(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(7);
    let cfg = InnerConfig::default();
    let (mut early, mut violations) = (0, 0);
    for _ in 0..20 {
        let (n, d) = (size_in(&mut s, 2, 6), size_in(&mut s, 1, 4));
        let x_true = s.gauss_vector(d);
        let m = size_in(&mut s, 2, 6);
        let ex = softmax_examples(&mut s, m, n, d, &x_true, 0.05);
        let w: Vec<f64> = (0..ex.len())
            .map(|_| uniform_in(&mut s, 0.2, 1.5))
            .collect();
        let sol = solve_weighted_softmax(&ex, &w, &cfg)?;
        if sol.steps_taken < cfg.max_steps {
            early += 1;
            violations += usize::from(weighted_grad(&ex, &w, &sol.x_star).norm() > cfg.grad_tol);
        }
    }
    verdict(
        early > 0 && violations == 0,
        format!("{early} early exits, {violations} above tolerance"),
    )
}

fn inner_weight_scaling(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(8);
    let cfg = InnerConfig {
        max_steps: 20_000,
        step_size: 0.2,
        grad_tol: 1e-10,
        ..InnerConfig::default()
    };
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let (n, d) = (size_in(&mut s, 3, 5), size_in(&mut s, 1, 3));
        let x_true = s.gauss_vector(d);
        let ex = softmax_examples(&mut s, 6, n, d, &x_true, 0.2);
        let w: Vec<f64> = (0..ex.len())
            .map(|_| uniform_in(&mut s, 0.3, 1.5))
            .collect();
        let scaled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let x1 = solve_weighted_softmax(&ex, &w, &cfg)?.x_star;
        let x2 = solve_weighted_softmax(&ex, &scaled, &cfg)?.x_star;
        for weights in [&w, &scaled] {
            let (l1, l2) = (
                weighted_loss(&ex, weights, &x1),
                weighted_loss(&ex, weights, &x2),
            );
            worst = worst.max((l1 - l2).abs() / l1.max(l2));
        }
    }
    verdict(
        worst <= 1e-6,
        format!("max relative loss gap {worst:.3e} under doubled weights"),
    )
}

fn inner_linear_consistent_residual(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(9);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let (n, d, m) = (
            size_in(&mut s, 2, 6),
            size_in(&mut s, 1, 2),
            size_in(&mut s, 1, 4),
        );
        let x_true = s.gauss_vector(d);
        let ex: Vec<Example> = (0..m)
            .map(|_| {
                let a = s.gauss_matrix(n, d);
                let b = a.matvec(&x_true);
                Example::new(a, b).expect("consistent shapes")
            })
            .collect();
        // One weight per example keeps the aggregate system consistent.
        let w: Vec<f64> = (0..m)
            .flat_map(|_| std::iter::repeat(uniform_in(&mut s, 0.5, 1.5)).take(n + 1))
            .collect();
        let x = solve_weighted_linear(&ex, &w, Ridge::Off)?;
        for e in &ex {
            worst = worst.max(e.a.matvec(&x).sub(&e.b).norm());
        }
    }
    verdict(worst <= 1e-9, format!("max residual {worst:.3e}"))
}

// ---- reweight ----

fn lift_gap(s: &mut Sampler, m: usize) -> Result<f64> {
    let n = 4;
    let ex: Vec<Example> = (0..m)
        .map(|_| {
            Example::new(s.gauss_matrix(n, n), bounded_vector(s, n, 1.0))
                .expect("consistent shapes")
        })
        .collect();
    let x = s.gauss_vector(n);
    let w: Vec<f64> = (0..m).map(|_| uniform_in(s, 0.0, 3.0)).collect();
    let weighted: f64 = ex
        .iter()
        .zip(&w)
        .map(|(e, wi)| wi * softmax_predict(&e.a, &x).sub(&e.b).norm_sq())
        .sum();
    let lifted = transformer_loss(&x, &ex, &lift_scalar_weights_at(&w, &ex, &x)?)?;
    Ok((weighted - lifted).abs())
}

fn reweight_single_pair_lift_equality(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(10);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        worst = worst.max(lift_gap(&mut s, 1)?);
    }
    verdict(
        worst <= 1e-9,
        format!("max absolute gap {worst:.3e} over 100 single pairs"),
    )
}

fn reweight_multi_pair_lift_equality(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(11);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        worst = worst.max(lift_gap(&mut s, 5)?);
    }
    verdict(
        worst <= 1e-9,
        format!("max absolute gap {worst:.3e} over 20 five-pair prefixes"),
    )
}

fn reweight_affine_in_bias(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(12);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let (n, m) = (size_in(&mut s, 1, 4), size_in(&mut s, 1, 3));
        let ex: Vec<Example> = (0..m)
            .map(|_| {
                Example::new(s.gauss_matrix(n, n), s.gauss_vector(n)).expect("consistent shapes")
            })
            .collect();
        let prefix = assemble_prefix(&ex)?;
        let rows = m * (n + 1);
        let w = s.gauss_vector(rows);
        let (b1, b2) = (s.gauss_matrix(rows, n), s.gauss_matrix(rows, n));
        let (alpha, beta) = (s.standard_normal(), s.standard_normal());
        let apply = |b: Matrix| -> Result<Matrix> {
            Ok(
                apply_reweight(&prefix, &ReweightParams::new(w.clone(), b)?)?
                    .assembled()
                    .clone(),
            )
        };
        let base = apply(Matrix::zeros(rows, n))?;
        let mut combo = b1.scaled(alpha);
        combo.axpy(beta, &b2);
        let lhs = apply(combo)?.sub(&base)?;
        let mut rhs = apply(b1)?.sub(&base)?.scaled(alpha);
        rhs.axpy(beta, &apply(b2)?.sub(&base)?);
        worst = worst.max(lhs.sub(&rhs)?.frobenius_norm());
    }
    verdict(
        worst <= 1e-12,
        format!("max deviation from affinity {worst:.3e}"),
    )
}

fn reweight_reg_zero_iff_lift(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(13);
    let cfg = RegConfig {
        gamma: 1.0,
        form: RegForm::Lifted,
    };
    let (mut at_lift, mut smallest_off) = (0.0_f64, f64::INFINITY);
    for _ in 0..20 {
        let (n, m) = (size_in(&mut s, 1, 4), size_in(&mut s, 1, 3));
        let ex: Vec<Example> = (0..m)
            .map(|_| {
                Example::new(s.gauss_matrix(n, n), bounded_vector(&mut s, n, 1.0))
                    .expect("consistent shapes")
            })
            .collect();
        let w: Vec<f64> = (0..m).map(|_| uniform_in(&mut s, 0.0, 3.0)).collect();
        let lifted = lift_scalar_weights(&w, &ex)?;
        at_lift = at_lift.max(reg_term(&lifted, &ex, &cfg)?);
        // Break one condition at a time: w_a, B_a and B_b of a random block.
        let i = s.below(m);
        let base = i * (n + 1);
        let mut broken = lifted.clone();
        broken.w[base + s.below(n)] += 0.1;
        smallest_off = smallest_off.min(reg_term(&broken, &ex, &cfg)?);
        let mut broken = lifted.clone();
        broken.bias[(base + s.below(n), s.below(n))] += 0.1;
        smallest_off = smallest_off.min(reg_term(&broken, &ex, &cfg)?);
        let mut broken = lifted.clone();
        broken.bias[(base + n, s.below(n))] += 0.1;
        smallest_off = smallest_off.min(reg_term(&broken, &ex, &cfg)?);
    }
    verdict(
        at_lift <= 1e-12 && smallest_off > 1e-12,
        format!("max at lift {at_lift:.3e}, min when a condition fails {smallest_off:.3e}"),
    )
}

// ---- ricl ----

fn noisy_cell(ctx: &Context, seed: u64, std: f64) -> Result<(Vec<Example>, Vec<Example>)> {
    let ds = generate_dataset(seed, &ctx.sizes, PrefixKind::Noisy { std })?;
    Ok((ds.prefix, ds.valid))
}

fn ricl_monotone_descent(ctx: &Context) -> Result<Verdict> {
    let mut worst_rise = f64::NEG_INFINITY;
    let mut steps = 0;
    for k in 0..10 {
        let seed = ctx.seed.wrapping_add(k);
        let (ex, val) = noisy_cell(ctx, seed, 0.5)?;
        let bench = BenchConfig::for_preset(ctx.preset, seed);
        let cfg = RiclConfig {
            outer_steps: 200,
            seed,
            ..bench.ricl
        };
        let losses = ricl_train(&ex, &val, &cfg)?.trace.losses();
        for pair in losses.windows(2) {
            worst_rise = worst_rise.max(pair[1] - pair[0]);
        }
        steps += losses.len() - 1;
    }
    verdict(
        worst_rise <= 1e-12,
        format!("largest step-to-step change {worst_rise:.3e} over {steps} steps"),
    )
}

fn ricl_stationarity(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(14);
    let n = 3;
    let x_true = s.gauss_vector(n);
    let ex = softmax_examples(&mut s, 4, n, n, &x_true, 0.3);
    let inner = InnerConfig {
        max_steps: 50,
        ..InnerConfig::default()
    };
    let mut cfg = RiclConfig {
        outer_steps: 3,
        inner: inner.clone(),
        meta_method: MetaMethod::Unrolled { steps: 50 },
        ..RiclConfig::new(Mode::Scalar)
    };
    // Validation targets reproduced exactly at the inner solution make the
    // outer gradient vanish.
    let x_star = inner_solution(&RiclParams::Scalar(Vector::ones(ex.len())), &ex, &inner)?;
    let fixed: Vec<Example> = (0..5)
        .map(|_| {
            let a = s.gauss_matrix(n, n);
            let b = softmax_predict(&a, &x_star);
            Example::new(a, b).expect("consistent shapes")
        })
        .collect();
    let rows = ricl_train(&ex, &fixed, &cfg)?.trace.rows;
    let stuck = rows
        .iter()
        .all(|r| r.grad_norm_sq == 0.0 && r.l_valid == rows[0].l_valid);
    // Away from a fixed point the gradient is nonzero and the first step moves.
    let noisy = softmax_examples(&mut s, 5, n, n, &x_true, 0.0);
    cfg.outer_steps = 1;
    let rows = ricl_train(&ex, &noisy, &cfg)?.trace.rows;
    let moves = rows[0].grad_norm_sq > 0.0 && rows[1].l_valid < rows[0].l_valid;
    verdict(
        stuck && moves,
        format!(
            "zero gradient keeps loss fixed: {stuck}, nonzero gradient decreases loss: {moves}"
        ),
    )
}

fn ricl_lookahead_matches_fd(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(15);
    let inner = InnerConfig {
        max_steps: 40,
        grad_tol: 1e-300,
        ..InnerConfig::default()
    };
    let mut worst = 0.0_f64;
    for k in 0..10 {
        let (n, m) = if k < 5 {
            (2, 2)
        } else {
            (size_in(&mut s, 2, 4), size_in(&mut s, 2, 4))
        };
        let x_true = s.gauss_vector(n);
        let ex = softmax_examples(&mut s, m, n, n, &x_true, 0.2);
        let val = softmax_examples(&mut s, 2, n, n, &x_true, 0.0);
        let params = if k % 2 == 0 {
            RiclParams::Scalar(Vector::new(
                (0..m).map(|_| uniform_in(&mut s, 0.5, 1.5)).collect(),
            ))
        } else {
            let mut p = ReweightParams::identity(m, n);
            p.w.iter_mut().for_each(|v| *v += 0.3 * s.standard_normal());
            p.bias = s.gauss_matrix(m * (n + 1), n).scaled(0.1);
            RiclParams::Transformer(p)
        };
        let eta = uniform_in(&mut s, 0.2, 1.0);
        let a = meta_gradient(
            &params,
            &ex,
            &val,
            &inner,
            MetaMethod::OneStepLookahead { eta },
        )?;
        let fd = meta_gradient(
            &params,
            &ex,
            &val,
            &inner,
            MetaMethod::FiniteDifference {
                h: 1e-5,
                of: Surrogate::Lookahead { eta },
            },
        )?;
        worst = worst.max(rel_diff(&a.to_flat(), &fd.to_flat()));
    }
    verdict(
        worst <= 1e-6,
        format!("max relative error {worst:.3e} over 10 instances"),
    )
}

fn ricl_lr_rule_monotone(_: &Context) -> Result<Verdict> {
    let by_batch: Vec<f64> = (1..=64)
        .map(|b| lr_rule(8, 8, RADIUS, b))
        .collect::<Result<_>>()?;
    let by_radius: Vec<f64> = (0..20)
        .map(|k| lr_rule(8, 8, 4.5 + 0.25 * k as f64, 10))
        .collect::<Result<_>>()?;
    let up = by_batch.windows(2).all(|p| p[1] > p[0]);
    let down = by_radius.windows(2).all(|p| p[1] < p[0]);
    verdict(
        up && down,
        format!("increasing in batch size: {up}, decreasing in R: {down}"),
    )
}

// ---- laricl ----

fn laricl_gradient_matches_fd(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(16);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = size_in(&mut s, 1, 4);
        let d = size_in(&mut s, 1, n);
        let m = size_in(&mut s, 1, 3);
        let mut draw = |count: usize| -> Vec<Example> {
            (0..count)
                .map(|_| {
                    Example::new(s.gauss_matrix(n, d), s.gauss_vector(n))
                        .expect("consistent shapes")
                })
                .collect()
        };
        let ex = draw(m);
        let val = draw(3);
        let w: Vec<f64> = (0..m * (n + 1))
            .map(|_| 1.0 + 0.3 * s.standard_normal())
            .collect();
        let a = laricl_grad(&w, &ex, &val, Ridge::Off, LariclGrad::Analytic)?;
        let fd = laricl_grad(
            &w,
            &ex,
            &val,
            Ridge::Off,
            LariclGrad::FiniteDifference { h: 1e-6 },
        )?;
        worst = worst.max(rel_diff(&a, &fd));
    }
    verdict(
        worst <= 1e-6,
        format!("max relative error {worst:.3e} over 100 instances"),
    )
}

fn linear_noisy_cell(s: &mut Sampler, n: usize, m: usize) -> (Vec<Example>, Vec<Example>) {
    let x_true = s.gauss_vector(n);
    let mut draw = |count: usize, noise: f64| -> Vec<Example> {
        (0..count)
            .map(|_| {
                let a = s.gauss_matrix(n, n);
                let mut b = a.matvec(&x_true);
                b.iter_mut().for_each(|v| *v += noise * s.standard_normal());
                Example::new(a, b).expect("consistent shapes")
            })
            .collect()
    };
    let ex = draw(m, 0.5);
    let val = draw(10, 0.0);
    (ex, val)
}

fn laricl_monotone_trace(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(17);
    let mut worst_rise = f64::NEG_INFINITY;
    for _ in 0..5 {
        let (ex, val) = linear_noisy_cell(&mut s, 3, 4);
        let out = laricl_train(&ex, &val, &LariclConfig::default())?;
        for pair in out.trace.losses().windows(2) {
            worst_rise = worst_rise.max(pair[1] - pair[0]);
        }
    }
    verdict(
        worst_rise <= 1e-12,
        format!("largest step-to-step change {worst_rise:.3e}"),
    )
}

fn laricl_normal_equations(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(18);
    let mut worst = 0.0_f64;
    for _ in 0..5 {
        let (ex, val) = linear_noisy_cell(&mut s, 3, 4);
        let cfg = LariclConfig {
            outer_steps: 30,
            ..LariclConfig::default()
        };
        laricl_train_observed(&ex, &val, &cfg, |_, w| {
            let sol = solve_weighted_linear_full(&ex, w, Ridge::Off)?;
            let (a, b) = (&sol.agg_a, &sol.agg_b);
            let gap = a.matvec_t(&a.matvec(&sol.x)).sub(&a.matvec_t(b)).norm();
            let scale = operator_norm(a, 1e-14) * b.norm();
            worst = worst.max(gap / scale.max(f64::MIN_POSITIVE));
            Ok(())
        })?;
    }
    verdict(
        worst <= 1e-8,
        format!("max scaled normal-equation residual {worst:.3e}"),
    )
}

// ---- datagen ----

fn noiseless_targets(ctx: &Context) -> Result<Vec<Vector>> {
    let sizes = ctx.sizes;
    let task = gen_task(sizes.n, sizes.d, sizes.m, &RngStream::new(ctx.seed, 1))?;
    let mut targets = Vec::new();
    for kind in [PrefixKind::Random, PrefixKind::Imbalanced { mean: 1.6 }] {
        targets.extend(
            gen_examples(kind, &task, &RngStream::new(ctx.seed, 2))?
                .into_iter()
                .map(|e| e.b),
        );
    }
    targets.extend(
        gen_eval_set(50, &task, &RngStream::new(ctx.seed, 3))?
            .into_iter()
            .map(|e| e.b),
    );
    Ok(targets)
}

fn datagen_noiseless_in_simplex(ctx: &Context) -> Result<Verdict> {
    let targets = noiseless_targets(ctx)?;
    let bad = targets
        .iter()
        .filter(|b| {
            (b.iter().sum::<f64>() - 1.0).abs() > 1e-12 || b.iter().any(|v| !(*v > 0.0 && *v < 1.0))
        })
        .count();
    verdict(
        bad == 0,
        format!("{bad} of {} targets off the open simplex", targets.len()),
    )
}

fn datagen_deterministic_bytes(ctx: &Context) -> Result<Verdict> {
    let sizes = Sizes {
        valid: 20,
        test: 20,
        ..ctx.sizes
    };
    let mut same = true;
    for kind in [PrefixKind::Random, PrefixKind::COMBINED] {
        let a = dataset_to_string(&generate_dataset(ctx.seed, &sizes, kind)?);
        let b = dataset_to_string(&generate_dataset(ctx.seed, &sizes, kind)?);
        same &= a == b;
    }
    verdict(same, format!("regenerated bytes identical: {same}"))
}

fn datagen_noiseless_norm_bound(ctx: &Context) -> Result<Verdict> {
    let targets = noiseless_targets(ctx)?;
    let worst = targets.iter().map(|b| b.norm()).fold(0.0, f64::max);
    verdict(worst <= 1.0, format!("max target norm {worst:.6}"))
}

// ---- bench ----

fn first_extreme(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if better(*v, values[best]) {
            best = i;
        }
    }
    best
}

fn bench_minmax_keeps_extremes(ctx: &Context) -> Result<Verdict> {
    let mut s = ctx.sampler(19);
    let mut bad = 0;
    for _ in 0..100 {
        let len = size_in(&mut s, 2, 12);
        let values: Vec<f64> = (0..len).map(|_| s.standard_normal()).collect();
        let scaled = minmax_scale(&values);
        let lt = |a: f64, b: f64| a < b;
        let gt = |a: f64, b: f64| a > b;
        bad += usize::from(
            first_extreme(&values, lt) != first_extreme(&scaled, lt)
                || first_extreme(&values, gt) != first_extreme(&scaled, gt)
                || scaled[first_extreme(&values, lt)] != 0.0
                || scaled[first_extreme(&values, gt)] != 1.0,
        );
    }
    verdict(bad == 0, format!("{bad} of 100 lists moved an extreme"))
}

fn bench_csv_reproducible(ctx: &Context) -> Result<Verdict> {
    let mut cfg = BenchConfig::for_preset(ctx.preset, ctx.seed);
    cfg.sizes = Sizes {
        valid: 40,
        test: 40,
        ..ctx.sizes
    };
    cfg.seeds.truncate(2);
    cfg.kinds = vec![PrefixKind::Noisy { std: 0.8 }, PrefixKind::COMBINED];
    cfg.ricl.outer_steps = 5;
    cfg.laricl.outer_steps = 5;
    let csv = |jobs: usize| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_bench_csv(&run_benchmark(&cfg, jobs)?, &mut buf)?;
        Ok(buf)
    };
    let first = csv(1)?;
    let again = first == csv(1)?;
    let threaded = first == csv(2)?;
    verdict(
        again && threaded,
        format!("rerun identical: {again}, two threads identical: {threaded}"),
    )
}

fn bench_oracle_is_floor(ctx: &Context) -> Result<Verdict> {
    let rows = ctx.bench_rows()?;
    let mut kinds: Vec<PrefixKind> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
    }
    let mut worst = 0.0_f64;
    for kind in kinds {
        let oracle = mean_mse(rows, Method::Oracle, kind)
            .ok_or_else(|| Error::PreconditionViolation(format!("no oracle rows for {kind}")))?;
        for m in [Method::IclUniform, Method::Ricl, Method::Laricl] {
            if let Some(v) = mean_mse(rows, m, kind) {
                worst = worst.max(oracle / v);
            }
        }
    }
    verdict(
        worst <= 1.05,
        format!("largest oracle / method mean MSE ratio {worst:.3e}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_dotted() {
        let names = property_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().all(|n| n.split('.').count() == 2));
    }

    #[test]
    fn every_module_is_covered() {
        let names = property_names();
        for module in [
            "linalg", "softmax", "inner", "reweight", "ricl", "laricl", "datagen", "bench",
        ] {
            assert!(
                names.iter().any(|n| n.starts_with(&format!("{module}."))),
                "{module}"
            );
        }
    }

    #[test]
    fn unknown_property_is_none() {
        assert!(run_property(&Context::new(Preset::Ci, 1), "softmax.missing").is_none());
    }

    #[test]
    fn cheap_properties_pass() {
        let ctx = Context::new(Preset::Ci, 1);
        for name in [
            "linalg.vec_kron_identity",
            "linalg.lstsq_residual_orthogonal",
            "linalg.gauss_bit_reproducible",
            "softmax.normalization",
            "softmax.gradient_matches_fd",
            "softmax.gradient_bound",
            "softmax.residual_bound",
            "softmax.lipschitz_log_space",
            "inner.linear_consistent_residual",
            "reweight.single_pair_lift_equality",
            "reweight.multi_pair_lift_equality",
            "reweight.affine_in_bias",
            "reweight.reg_zero_iff_lift",
            "ricl.lr_rule_monotone",
            "ricl.stationarity",
            "datagen.noiseless_in_simplex",
            "datagen.noiseless_norm_bound",
            "bench.minmax_keeps_extremes",
        ] {
            let r = run_property(&ctx, name).unwrap();
            assert!(r.passed, "{name}: {}", r.detail);
        }
    }
}
