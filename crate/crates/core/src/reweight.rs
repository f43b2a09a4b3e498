//! Structured reweighting of an assembled prefix.
//!
//! A prefix of `m` square examples is the `m(n+1) x d` matrix
//! `[A_1; b_1^T; ...; A_m; b_m^T]`. Reweighting applies `diag(w) * prefix + B`
//! where `w` and `B` split into per-example blocks
//! `(w_a_i in R^n, w_b_i in R)` and `(B_a_i in R^{n x d}, B_b_i in R^d)`.

use crate::error::{Error, Result};
use crate::inner::{common_shape, Example};
use crate::linalg::{Matrix, Vector};
use crate::softmax::softmax_predict;

/// Examples together with their stacked block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefix {
    examples: Vec<Example>,
    assembled: Matrix,
}

impl Prefix {
    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn assembled(&self) -> &Matrix {
        &self.assembled
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Token count `n` (equal to the model width `d`).
    pub fn n(&self) -> usize {
        self.assembled.cols()
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }
}

/// Checks the square-instance requirement and returns `n`.
pub fn square_shape(examples: &[Example]) -> Result<usize> {
    let (n, d) = common_shape(examples)?;
    if n != d {
        return Err(Error::shape(
            "prefix (requires n = d)",
            format!("{d} x {d}"),
            format!("{n} x {d}"),
        ));
    }
    Ok(n)
}

pub fn assemble_prefix(examples: &[Example]) -> Result<Prefix> {
    let n = square_shape(examples)?;
    let m = examples.len();
    let mut assembled = Matrix::zeros(m * (n + 1), n);
    for (i, e) in examples.iter().enumerate() {
        let base = i * (n + 1);
        for r in 0..n {
            assembled.row_mut(base + r).copy_from_slice(e.a.row(r));
        }
        assembled.row_mut(base + n).copy_from_slice(&e.b);
    }
    Ok(Prefix {
        examples: examples.to_vec(),
        assembled,
    })
}

/// Splits an `m(n+1) x n` block matrix back into examples.
pub fn decompose_prefix(assembled: &Matrix) -> Result<Prefix> {
    let n = assembled.cols();
    if n == 0 || assembled.rows() % (n + 1) != 0 {
        return Err(Error::shape(
            "decompose_prefix",
            format!("multiple of {} rows", n + 1),
            assembled.rows(),
        ));
    }
    let m = assembled.rows() / (n + 1);
    let examples = (0..m)
        .map(|i| {
            let base = i * (n + 1);
            let a = Matrix::from_fn(n, n, |r, c| assembled[(base + r, c)]);
            Example::new(a, Vector::from_slice(assembled.row(base + n)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prefix {
        examples,
        assembled: assembled.clone(),
    })
}

/// `W = diag(w)` and bias `B`, both in the prefix's block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightParams {
    pub w: Vector,
    pub bias: Matrix,
}

impl ReweightParams {
    /// `w = 1`, `B = 0`.
    pub fn identity(m: usize, n: usize) -> Self {
        ReweightParams {
            w: Vector::ones(m * (n + 1)),
            bias: Matrix::zeros(m * (n + 1), n),
        }
    }

    pub fn new(w: Vector, bias: Matrix) -> Result<Self> {
        let n = bias.cols();
        if bias.rows() != w.len() || n == 0 || w.len() % (n + 1) != 0 {
            return Err(Error::shape(
                "ReweightParams",
                format!("w of length m(n+1) with B {} x {}", w.len(), n),
                format!("w {}, B {:?}", w.len(), bias.shape()),
            ));
        }
        Ok(ReweightParams { w, bias })
    }

    pub fn n(&self) -> usize {
        self.bias.cols()
    }

    pub fn num_examples(&self) -> usize {
        self.w.len() / (self.n() + 1)
    }

    pub fn w_a(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.w[i * (n + 1)..i * (n + 1) + n]
    }

    pub fn w_b(&self, i: usize) -> f64 {
        let n = self.n();
        self.w[i * (n + 1) + n]
    }

    /// Row `r` of `B_a_i`.
    pub fn b_a_row(&self, i: usize, r: usize) -> &[f64] {
        self.bias.row(i * (self.n() + 1) + r)
    }

    pub fn b_b(&self, i: usize) -> &[f64] {
        let n = self.n();
        self.bias.row(i * (n + 1) + n)
    }

    fn check_against(&self, m: usize, n: usize) -> Result<()> {
        if self.n() != n || self.num_examples() != m {
            return Err(Error::shape(
                "ReweightParams vs prefix",
                format!("m = {m}, n = {n}"),
                format!("m = {}, n = {}", self.num_examples(), self.n()),
            ));
        }
        Ok(())
    }

    /// Flattened `[w, vec(B)]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.to_vec();
        v.extend_from_slice(self.bias.data());
        v
    }

    pub fn from_flat(flat: &[f64], m: usize, n: usize) -> Result<Self> {
        let len_w = m * (n + 1);
        if flat.len() != len_w * (n + 1) {
            return Err(Error::shape(
                "ReweightParams::from_flat",
                len_w * (n + 1),
                flat.len(),
            ));
        }
        ReweightParams::new(
            Vector::from_slice(&flat[..len_w]),
            Matrix::new(len_w, n, flat[len_w..].to_vec())?,
        )
    }
}

/// Full-matrix path: `diag(w) * prefix + B`.
pub fn apply_reweight(prefix: &Prefix, params: &ReweightParams) -> Result<Prefix> {
    params.check_against(prefix.len(), prefix.n())?;
    let src = prefix.assembled();
    let mut out = Matrix::zeros(src.rows(), src.cols());
    for r in 0..src.rows() {
        let wr = params.w[r];
        for ((o, p), b) in out
            .row_mut(r)
            .iter_mut()
            .zip(src.row(r))
            .zip(params.bias.row(r))
        {
            *o = wr * p + b;
        }
    }
    decompose_prefix(&out)
}

/// Per-pair path: `(diag(w_a_i) A_i + B_a_i, w_b_i b_i + B_b_i)`.
pub fn reweight_pairs(examples: &[Example], params: &ReweightParams) -> Result<Vec<Example>> {
    let n = square_shape(examples)?;
    params.check_against(examples.len(), n)?;
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let wa = params.w_a(i);
            let a = Matrix::from_fn(n, n, |r, c| wa[r] * e.a[(r, c)] + params.b_a_row(i, r)[c]);
            let wb = params.w_b(i);
            let b: Vec<f64> =
                e.b.iter()
                    .zip(params.b_b(i))
                    .map(|(bv, bias)| wb * bv + bias)
                    .collect();
            Example::new(a, Vector::new(b))
        })
        .collect()
}

fn check_nonnegative(w: &[f64]) -> Result<()> {
    match w.iter().position(|v| *v < 0.0 || v.is_nan()) {
        Some(index) => Err(Error::NegativeWeight {
            index,
            value: w[index],
        }),
        None => Ok(()),
    }
}

/// Lift of per-example scalar weights using the data-form conditions:
/// `w_a = 1`, `B_a = 0`, `w_b = sqrt(w)`, `B_b = (sqrt(w) - 1) b`.
pub fn lift_scalar_weights(w_scalar: &[f64], examples: &[Example]) -> Result<ReweightParams> {
    let n = square_shape(examples)?;
    if w_scalar.len() != examples.len() {
        return Err(Error::shape(
            "lift_scalar_weights",
            examples.len(),
            w_scalar.len(),
        ));
    }
    check_nonnegative(w_scalar)?;
    let mut params = ReweightParams::identity(examples.len(), n);
    for (i, (e, ws)) in examples.iter().zip(w_scalar).enumerate() {
        let root = ws.sqrt();
        params.w[i * (n + 1) + n] = root;
        params
            .bias
            .row_mut(i * (n + 1) + n)
            .iter_mut()
            .zip(e.b.iter())
            .for_each(|(o, bv)| *o = (root - 1.0) * bv);
    }
    Ok(params)
}

/// Lift anchored at the prediction `f(A_i x)`: `w_b = sqrt(w)` and
/// `B_b = (1 - sqrt(w)) f(A_i x)`, so that at this `x`
/// `f(A_i x) - b_rw = sqrt(w) (f(A_i x) - b_i)` holds exactly.
pub fn lift_scalar_weights_at(
    w_scalar: &[f64],
    examples: &[Example],
    x: &[f64],
) -> Result<ReweightParams> {
    let n = square_shape(examples)?;
    if w_scalar.len() != examples.len() {
        return Err(Error::shape(
            "lift_scalar_weights_at",
            examples.len(),
            w_scalar.len(),
        ));
    }
    if x.len() != n {
        return Err(Error::shape("lift_scalar_weights_at x", n, x.len()));
    }
    check_nonnegative(w_scalar)?;
    let mut params = ReweightParams::identity(examples.len(), n);
    for (i, (e, ws)) in examples.iter().zip(w_scalar).enumerate() {
        let root = ws.sqrt();
        let f = softmax_predict(&e.a, x);
        params.w[i * (n + 1) + n] = root;
        params
            .bias
            .row_mut(i * (n + 1) + n)
            .iter_mut()
            .zip(f.iter())
            .for_each(|(o, fv)| *o = (1.0 - root) * fv);
    }
    Ok(params)
}

/// `sum_i ||f(A~_i x) - b~_i||^2` over the reweighted pairs.
pub fn transformer_loss(x: &[f64], examples: &[Example], params: &ReweightParams) -> Result<f64> {
    let pairs = reweight_pairs(examples, params)?;
    if x.len() != params.n() {
        return Err(Error::shape("transformer_loss x", params.n(), x.len()));
    }
    Ok(pairs
        .iter()
        .map(|p| softmax_predict(&p.a, x).sub(&p.b).norm_sq())
        .sum())
}

/// How the target of the `B_b` penalty is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegForm {
    /// `||B_b - (sqrt(w_b) - 1) b||^2`; requires `w_b >= 0`.
    Printed,
    /// `||B_b - (w_b - 1) b||^2`, zero exactly at [`lift_scalar_weights`].
    #[default]
    Lifted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub gamma: f64,
    pub form: RegForm,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            gamma: 0.0,
            form: RegForm::Lifted,
        }
    }
}

fn b_target_scale(form: RegForm, w_b: f64) -> f64 {
    match form {
        RegForm::Printed => w_b.sqrt() - 1.0,
        RegForm::Lifted => w_b - 1.0,
    }
}

fn reg_precheck(params: &ReweightParams, examples: &[Example], cfg: &RegConfig) -> Result<usize> {
    let n = square_shape(examples)?;
    params.check_against(examples.len(), n)?;
    if !cfg.gamma.is_finite() || cfg.gamma < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "gamma must be finite and >= 0, got {}",
            cfg.gamma
        )));
    }
    if cfg.form == RegForm::Printed {
        let wb: Vec<f64> = (0..examples.len()).map(|i| params.w_b(i)).collect();
        check_nonnegative(&wb).map_err(|e| match e {
            Error::NegativeWeight { index, value } => Error::NegativeWeight {
                index: index * (n + 1) + n,
                value,
            },
            other => other,
        })?;
    }
    Ok(n)
}

/// `gamma * sum_i (||diag(w_a_i) A_i + B_a_i - A_i||_F^2 + ||B_b_i - s(w_b_i) b_i||^2)`
/// with `s` chosen by [`RegForm`].
pub fn reg_term(params: &ReweightParams, examples: &[Example], cfg: &RegConfig) -> Result<f64> {
    let n = reg_precheck(params, examples, cfg)?;
    if cfg.gamma == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, e) in examples.iter().enumerate() {
        let wa = params.w_a(i);
        for r in 0..n {
            let brow = params.b_a_row(i, r);
            for c in 0..n {
                let a = e.a[(r, c)];
                total += (wa[r] * a + brow[c] - a).powi(2);
            }
        }
        let s = b_target_scale(cfg.form, params.w_b(i));
        total += params
            .b_b(i)
            .iter()
            .zip(e.b.iter())
            .map(|(bb, bv)| (bb - s * bv).powi(2))
            .sum::<f64>();
    }
    Ok(cfg.gamma * total)
}

/// Analytic gradient of [`reg_term`], in the layout of [`ReweightParams`].
pub fn reg_gradient(
    params: &ReweightParams,
    examples: &[Example],
    cfg: &RegConfig,
) -> Result<ReweightParams> {
    let n = reg_precheck(params, examples, cfg)?;
    let m = examples.len();
    let mut grad = ReweightParams {
        w: Vector::zeros(m * (n + 1)),
        bias: Matrix::zeros(m * (n + 1), n),
    };
    if cfg.gamma == 0.0 {
        return Ok(grad);
    }
    let g2 = 2.0 * cfg.gamma;
    for (i, e) in examples.iter().enumerate() {
        let base = i * (n + 1);
        let wa = params.w_a(i).to_vec();
        for r in 0..n {
            let brow = params.b_a_row(i, r).to_vec();
            let mut dw = 0.0;
            for c in 0..n {
                let a = e.a[(r, c)];
                let resid = wa[r] * a + brow[c] - a;
                grad.bias[(base + r, c)] = g2 * resid;
                dw += resid * a;
            }
            grad.w[base + r] = g2 * dw;
        }
        let wb = params.w_b(i);
        let s = b_target_scale(cfg.form, wb);
        let ds = match cfg.form {
            RegForm::Printed => 0.5 / wb.sqrt(),
            RegForm::Lifted => 1.0,
        };
        let mut dwb = 0.0;
        for c in 0..n {
            let resid = params.b_b(i)[c] - s * e.b[c];
            grad.bias[(base + n, c)] = g2 * resid;
            dwb -= resid * e.b[c];
        }
        grad.w[base + n] = g2 * ds * dwb;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::softmax::softmax;

    fn examples(m: usize, n: usize, seed: u64) -> Vec<Example> {
        let mut s = RngStream::new(seed, 0).sampler();
        (0..m)
            .map(|_| Example::new(s.gauss_matrix(n, n), softmax(&s.gauss_vector(n))).unwrap())
            .collect()
    }

    #[test]
    fn single_example_layout() {
        let ex = examples(1, 3, 1);
        let p = assemble_prefix(&ex).unwrap();
        assert_eq!(p.assembled().shape(), (4, 3));
        for r in 0..3 {
            assert_eq!(p.assembled().row(r), ex[0].a.row(r));
        }
        assert_eq!(p.assembled().row(3), ex[0].b.as_slice());
    }

    #[test]
    fn shape_is_m_times_n_plus_one() {
        let p = assemble_prefix(&examples(5, 4, 2)).unwrap();
        assert_eq!(p.assembled().shape(), (25, 4));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ex = examples(3, 3, 3);
        let p = assemble_prefix(&ex).unwrap();
        assert_eq!(
            decompose_prefix(p.assembled()).unwrap().examples(),
            ex.as_slice()
        );
    }

    #[test]
    fn non_square_examples_rejected() {
        let e = Example::new(Matrix::zeros(2, 3), Vector::zeros(2)).unwrap();
        assert!(matches!(
            assemble_prefix(&[e]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identity_params_leave_prefix_unchanged() {
        let p = assemble_prefix(&examples(2, 3, 4)).unwrap();
        let out = apply_reweight(&p, &ReweightParams::identity(2, 3)).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn doubling_w_b_scales_only_target_row() {
        let p = assemble_prefix(&examples(1, 3, 5)).unwrap();
        let mut params = ReweightParams::identity(1, 3);
        params.w[3] = 2.0;
        let out = apply_reweight(&p, &params).unwrap();
        for r in 0..3 {
            assert_eq!(out.assembled().row(r), p.assembled().row(r));
        }
        for (u, v) in out.assembled().row(3).iter().zip(p.assembled().row(3)) {
            assert_eq!(*u, 2.0 * v);
        }
    }

    #[test]
    fn full_matrix_and_per_pair_paths_agree() {
        let ex = examples(3, 3, 6);
        let p = assemble_prefix(&ex).unwrap();
        let mut s = RngStream::new(60, 0).sampler();
        let params = ReweightParams::new(s.gauss_vector(12), s.gauss_matrix(12, 3)).unwrap();
        let full = apply_reweight(&p, &params).unwrap();
        let pairs = reweight_pairs(&ex, &params).unwrap();
        assert_eq!(full.examples(), pairs.as_slice());
    }

    #[test]
    fn lift_identity_weights() {
        let ex = examples(2, 3, 7);
        let params = lift_scalar_weights(&[1.0, 1.0], &ex).unwrap();
        assert_eq!(params, ReweightParams::identity(2, 3));
    }

    #[test]
    fn lift_four_gives_root_two_and_bias_b() {
        let ex = examples(1, 3, 8);
        let params = lift_scalar_weights(&[4.0], &ex).unwrap();
        assert_eq!(params.w_b(0), 2.0);
        assert_eq!(params.b_b(0), ex[0].b.as_slice());
        assert!(params.w_a(0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn lift_zero_cancels_example() {
        let ex = examples(1, 3, 9);
        let params = lift_scalar_weights(&[0.0], &ex).unwrap();
        assert_eq!(params.w_b(0), 0.0);
        let neg: Vec<f64> = ex[0].b.iter().map(|v| -v).collect();
        assert_eq!(params.b_b(0), neg.as_slice());
    }

    #[test]
    fn lift_rejects_negative() {
        let ex = examples(2, 3, 10);
        assert!(matches!(
            lift_scalar_weights(&[1.0, -0.5], &ex),
            Err(Error::NegativeWeight { index: 1, .. })
        ));
    }

    #[test]
    fn identity_params_give_twice_the_softmax_loss() {
        let ex = examples(3, 3, 11);
        let x = [0.2, -0.4, 0.9];
        let tl = transformer_loss(&x, &ex, &ReweightParams::identity(3, 3)).unwrap();
        let sr: f64 = ex
            .iter()
            .map(|e| crate::softmax::sr_loss(&e.a, &e.b, &x))
            .sum();
        assert!((tl - 2.0 * sr).abs() < 1e-14);
    }

    #[test]
    fn anchored_lift_four_is_four_times_residual() {
        let ex = examples(1, 4, 12);
        let x = [0.5, -1.0, 0.3, 0.2];
        let params = lift_scalar_weights_at(&[4.0], &ex, &x).unwrap();
        let tl = transformer_loss(&x, &ex, &params).unwrap();
        let base = softmax_predict(&ex[0].a, &x).sub(&ex[0].b).norm_sq();
        assert!((tl - 4.0 * base).abs() < 1e-14);
    }

    #[test]
    fn data_form_lift_targets_scaled_data() {
        // With B_b = (sqrt(w) - 1) b the reweighted target is (2 sqrt(w) - 1) b.
        let ex = examples(1, 3, 13);
        let x = [0.1, 0.7, -0.3];
        let params = lift_scalar_weights(&[4.0], &ex).unwrap();
        let tl = transformer_loss(&x, &ex, &params).unwrap();
        let expect = softmax_predict(&ex[0].a, &x)
            .sub(&ex[0].b.scaled(3.0))
            .norm_sq();
        assert!((tl - expect).abs() < 1e-14);
    }

    #[test]
    fn reg_zero_for_lift_and_zero_gamma() {
        let ex = examples(3, 3, 14);
        let params = lift_scalar_weights(&[0.3, 2.0, 5.0], &ex).unwrap();
        let cfg = RegConfig {
            gamma: 1.7,
            form: RegForm::Lifted,
        };
        assert!(reg_term(&params, &ex, &cfg).unwrap().abs() < 1e-12);
        let mut s = RngStream::new(140, 0).sampler();
        let random = ReweightParams::new(s.gauss_vector(12), s.gauss_matrix(12, 3)).unwrap();
        let zero = RegConfig {
            gamma: 0.0,
            form: RegForm::Lifted,
        };
        assert_eq!(reg_term(&random, &ex, &zero).unwrap(), 0.0);
    }

    #[test]
    fn printed_reg_form() {
        let ex = examples(2, 3, 15);
        let cfg = RegConfig {
            gamma: 1.0,
            form: RegForm::Printed,
        };
        // B_b = (sqrt(w_b) - 1) b zeroes the printed penalty.
        let mut params = ReweightParams::identity(2, 3);
        params.w[3] = 4.0;
        params
            .bias
            .row_mut(3)
            .iter_mut()
            .zip(ex[0].b.iter())
            .for_each(|(o, b)| *o = *b);
        assert!(reg_term(&params, &ex, &cfg).unwrap().abs() < 1e-15);
        // sqrt(w) lifts are penalized unless w is 0 or 1
        let lifted = lift_scalar_weights(&[4.0, 1.0], &ex).unwrap();
        let expect: f64 = ex[0].b.norm_sq() * (1.0 - (2f64.sqrt() - 1.0)).powi(2);
        assert!((reg_term(&lifted, &ex, &cfg).unwrap() - expect).abs() < 1e-14);
        params.w[3] = -1.0;
        assert!(matches!(
            reg_term(&params, &ex, &cfg),
            Err(Error::NegativeWeight { index: 3, .. })
        ));
    }

    #[test]
    fn perturbing_bias_block_costs_gamma_norm_sq() {
        let ex = examples(2, 3, 16);
        let gamma = 0.7;
        let cfg = RegConfig {
            gamma,
            form: RegForm::Lifted,
        };
        let mut params = lift_scalar_weights(&[2.0, 0.5], &ex).unwrap();
        let mut s = RngStream::new(160, 0).sampler();
        let delta = s.gauss_matrix(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                params.bias[(4 + r, c)] += delta[(r, c)];
            }
        }
        let got = reg_term(&params, &ex, &cfg).unwrap();
        assert!((got - gamma * delta.frobenius_norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn reg_gradient_matches_central_differences() {
        let ex = examples(2, 3, 17);
        let mut s = RngStream::new(170, 0).sampler();
        let mut w = s.gauss_vector(8);
        w.iter_mut().for_each(|v| *v = v.abs() + 0.2);
        let params = ReweightParams::new(w, s.gauss_matrix(8, 3)).unwrap();
        for form in [RegForm::Lifted, RegForm::Printed] {
            let cfg = RegConfig { gamma: 0.9, form };
            let g = reg_gradient(&params, &ex, &cfg).unwrap().to_flat();
            let flat = params.to_flat();
            let h = 1e-6;
            for k in 0..flat.len() {
                let mut p = flat.clone();
                p[k] += h;
                let up =
                    reg_term(&ReweightParams::from_flat(&p, 2, 3).unwrap(), &ex, &cfg).unwrap();
                p[k] -= 2.0 * h;
                let dn =
                    reg_term(&ReweightParams::from_flat(&p, 2, 3).unwrap(), &ex, &cfg).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()),
                    "{form:?} {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }
}
