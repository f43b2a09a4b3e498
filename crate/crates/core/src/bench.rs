//! Test-set comparison of prefix weighting methods across corruption kinds.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::datagen::{generate_dataset, robustness_grid, Dataset, PrefixKind, Preset, Sizes};
use crate::error::{Error, Result};
use crate::inner::{solve_weighted_softmax, Example, InnerConfig, Ridge};
use crate::laricl::{laricl_train_observed, LariclConfig};
use crate::linalg::{Matrix, Vector};
use crate::reweight::ReweightParams;
use crate::ricl::{
    inner_solution, ricl_train, validation_loss, MetaMethod, Mode, RiclConfig, RiclParams,
};
use crate::softmax::softmax_predict;
use crate::trace::fmt_f64;

/// `(1/n) sum_j (pred_j - target_j)^2`
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::shape("mse", "at least one entry", 0));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// Maps the minimum to 0 and the maximum to 1. Constant input maps to 0.
pub fn minmax_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Mean test MSE of `f(A_t x)` against `b_t`.
pub fn test_mse(test: &[Example], x: &[f64]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::PreconditionViolation("empty test set".into()));
    }
    let mut total = 0.0;
    for t in test {
        if t.a.cols() != x.len() {
            return Err(Error::shape("test inputs", x.len(), t.a.cols()));
        }
        total += mse(&softmax_predict(&t.a, x), &t.b)?;
    }
    Ok(total / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    IclUniform,
    Ricl,
    Laricl,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::IclUniform,
        Method::Ricl,
        Method::Laricl,
        Method::Oracle,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::IclUniform => "icl-uniform",
            Method::Ricl => "ricl",
            Method::Laricl => "laricl",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellStatus::Ok => f.write_str("ok"),
            CellStatus::Failed(msg) => write!(f, "failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub kind: PrefixKind,
    pub seed: u64,
    /// NaN when the cell failed.
    pub mse: f64,
    pub mse_scaled: f64,
    pub status: CellStatus,
    /// Whether the LARICL checkpoint search kept the starting weights.
    pub kept_initial: bool,
}

impl BenchRow {
    pub fn param(&self) -> f64 {
        self.kind.param()
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

/// How LARICL weights are chosen for the softmax model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LariclSelection {
    /// The last iterate.
    Final,
    /// The iterate (starting weights included) with the lowest softmax
    /// validation loss.
    BestValidation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Sizes,
    pub seeds: Vec<u64>,
    pub kinds: Vec<PrefixKind>,
    pub methods: Vec<Method>,
    /// Inner solver shared by every method that reads the prefix.
    pub inner: InnerConfig,
    /// Converged solve used for the oracle reference.
    pub oracle_inner: InnerConfig,
    pub ricl: RiclConfig,
    pub laricl: LariclConfig,
    pub laricl_selection: LariclSelection,
}

impl BenchConfig {
    /// Defaults for `preset` with seeds `seed, seed + 1, ...`.
    pub fn for_preset(preset: Preset, seed: u64) -> Self {
        let sizes = preset.sizes();
        let inner = InnerConfig {
            max_steps: 100,
            step_size: 0.1,
            grad_tol: 1e-12,
            ..InnerConfig::default()
        };
        // Same effective step per example as the prefix solve.
        let oracle_inner = InnerConfig {
            max_steps: 5000,
            step_size: inner.step_size * sizes.m as f64 / sizes.valid as f64,
            grad_tol: 1e-10,
            ..InnerConfig::default()
        };
        let mut ricl = RiclConfig::new(Mode::Scalar);
        ricl.outer_steps = 100;
        ricl.outer_lr = 1.0;
        ricl.inner = inner.clone();
        ricl.meta_method = MetaMethod::Unrolled {
            steps: inner.max_steps,
        };
        let laricl = LariclConfig {
            outer_steps: 100,
            outer_lr: 1.0,
            ridge: Ridge::Fallback,
            ..LariclConfig::default()
        };
        BenchConfig {
            sizes,
            seeds: (0..sizes.seeds as u64)
                .map(|k| seed.wrapping_add(k))
                .collect(),
            kinds: vec![
                PrefixKind::Random,
                PrefixKind::Imbalanced { mean: 0.8 },
                PrefixKind::Noisy { std: 0.8 },
                PrefixKind::COMBINED,
            ],
            methods: Method::ALL.to_vec(),
            inner,
            oracle_inner,
            ricl,
            laricl,
            laricl_selection: LariclSelection::BestValidation,
        }
    }

    /// Imbalanced prefixes over the mean grid and noisy prefixes over the
    /// noise grid.
    pub fn with_robustness_grid(mut self) -> Self {
        let grid = robustness_grid();
        self.kinds = grid
            .means
            .iter()
            .map(|&mean| PrefixKind::Imbalanced { mean })
            .chain(grid.stds.iter().map(|&std| PrefixKind::Noisy { std }))
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.kinds.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidConfig(
                "benchmark needs seeds, kinds and methods".into(),
            ));
        }
        for k in &self.kinds {
            k.validate()?;
        }
        self.inner.validate()?;
        self.oracle_inner.validate()?;
        self.laricl.validate()?;
        Ok(())
    }
}

/// Uniform `(w, B = 0)` with `w` given in the prefix block layout.
fn blockwise_params(w: &Vector, n: usize) -> Result<RiclParams> {
    Ok(RiclParams::Transformer(ReweightParams::new(
        w.clone(),
        Matrix::zeros(w.len(), n),
    )?))
}

/// Returns the solution used for prediction and whether LARICL kept its
/// starting weights.
fn run_method(method: Method, data: &Dataset, cfg: &BenchConfig) -> Result<(Vector, bool)> {
    let uniform = vec![1.0; data.prefix.len()];
    match method {
        Method::IclUniform => Ok((
            solve_weighted_softmax(&data.prefix, &uniform, &cfg.inner)?.x_star,
            false,
        )),
        Method::Oracle => {
            let w = vec![1.0; data.valid.len()];
            Ok((
                solve_weighted_softmax(&data.valid, &w, &cfg.oracle_inner)?.x_star,
                false,
            ))
        }
        Method::Ricl => {
            let ricl = RiclConfig {
                seed: data.seed,
                ..cfg.ricl.clone()
            };
            let out = ricl_train(&data.prefix, &data.valid, &ricl)?;
            Ok((
                inner_solution(&out.params, &data.prefix, &ricl.inner)?,
                false,
            ))
        }
        Method::Laricl => {
            let n = data.task.n;
            let mut best: Option<(f64, usize, Vector)> = None;
            let out = laricl_train_observed(&data.prefix, &data.valid, &cfg.laricl, |t, w| {
                if cfg.laricl_selection == LariclSelection::BestValidation {
                    let loss = validation_loss(
                        &blockwise_params(w, n)?,
                        &data.prefix,
                        &data.valid,
                        &cfg.inner,
                    )?;
                    if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
                        best = Some((loss, t, w.clone()));
                    }
                }
                Ok(())
            })?;
            let (w, kept_initial) = match best {
                Some((_, t, w)) => (w, t == 0),
                None => (out.w, false),
            };
            Ok((
                inner_solution(&blockwise_params(&w, n)?, &data.prefix, &cfg.inner)?,
                kept_initial,
            ))
        }
    }
}

fn run_cell(kind: PrefixKind, seed: u64, cfg: &BenchConfig) -> Vec<BenchRow> {
    let data = generate_dataset(seed, &cfg.sizes, kind);
    cfg.methods
        .iter()
        .map(|&method| {
            let outcome = data.as_ref().map_err(Clone::clone).and_then(|d| {
                run_method(method, d, cfg).and_then(|(x, kept)| Ok((test_mse(&d.test, &x)?, kept)))
            });
            let (mse, status, kept_initial) = match outcome {
                Ok((v, kept)) if v.is_finite() => (v, CellStatus::Ok, kept),
                Ok((v, _)) => (
                    f64::NAN,
                    CellStatus::Failed(format!("non-finite mse {v}")),
                    false,
                ),
                Err(e) => (f64::NAN, CellStatus::Failed(e.to_string()), false),
            };
            BenchRow {
                method,
                kind,
                seed,
                mse,
                mse_scaled: f64::NAN,
                status,
                kept_initial,
            }
        })
        .collect()
}

fn kind_cmp(a: &PrefixKind, b: &PrefixKind) -> Ordering {
    a.rank()
        .cmp(&b.rank())
        .then(a.param().total_cmp(&b.param()))
        .then(a.mean().total_cmp(&b.mean()))
}

fn row_cmp(a: &BenchRow, b: &BenchRow) -> Ordering {
    kind_cmp(&a.kind, &b.kind)
        .then(a.method.cmp(&b.method))
        .then(a.seed.cmp(&b.seed))
}

/// Fills `mse_scaled` by min-max scaling within each kind (all methods and
/// seeds together). Failed rows keep NaN.
fn scale_groups(rows: &mut [BenchRow]) {
    let mut start = 0;
    while start < rows.len() {
        let mut end = start + 1;
        while end < rows.len() && kind_cmp(&rows[end].kind, &rows[start].kind) == Ordering::Equal {
            end += 1;
        }
        rows[start..end]
            .iter_mut()
            .for_each(|r| r.mse_scaled = f64::NAN);
        let ok: Vec<usize> = (start..end).filter(|&i| rows[i].is_ok()).collect();
        let scaled = minmax_scale(&ok.iter().map(|&i| rows[i].mse).collect::<Vec<_>>());
        for (i, s) in ok.into_iter().zip(scaled) {
            rows[i].mse_scaled = s;
        }
        start = end;
    }
}

/// Runs every `(kind, seed)` cell on a pool of `jobs` threads. Output order
/// is canonical and does not depend on `jobs`.
pub fn run_benchmark(cfg: &BenchConfig, jobs: usize) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let cells: Vec<(PrefixKind, u64)> = cfg
        .kinds
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut rows: Vec<BenchRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(kind, seed)| run_cell(kind, seed, cfg))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    rows.sort_by(row_cmp);
    scale_groups(&mut rows);
    Ok(rows)
}

/// [`run_benchmark`] over the mean and noise grids.
pub fn robustness_sweep(cfg: &BenchConfig, jobs: usize) -> Result<Vec<BenchRow>> {
    run_benchmark(&cfg.clone().with_robustness_grid(), jobs)
}

pub const BENCH_HEADER: [&str; 7] = [
    "method",
    "kind",
    "param",
    "seed",
    "mse",
    "mse_scaled",
    "status",
];

/// Long-format CSV, one row per `(method, kind, param, seed)`.
pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(BENCH_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            r.kind.label().to_string(),
            fmt_f64(r.param()),
            r.seed.to_string(),
            fmt_f64(r.mse),
            fmt_f64(r.mse_scaled),
            r.status.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub kind: PrefixKind,
    pub mean_mse: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_mse: f64,
    pub seeds: usize,
}

/// Mean and spread across seeds of each `(method, kind)`, over successful
/// rows only.
pub fn summarize(rows: &[BenchRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(PrefixKind, Method)> = Vec::new();
    for r in rows {
        if !keys
            .iter()
            .any(|(k, m)| kind_cmp(k, &r.kind) == Ordering::Equal && *m == r.method)
        {
            keys.push((r.kind, r.method));
        }
    }
    keys.sort_by(|a, b| kind_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
    keys.into_iter()
        .map(|(kind, method)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.method == method && kind_cmp(&r.kind, &kind) == Ordering::Equal && r.is_ok()
                })
                .map(|r| r.mse)
                .collect();
            let n = vals.len();
            let mean = if n > 0 {
                vals.iter().sum::<f64>() / n as f64
            } else {
                f64::NAN
            };
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else if n == 1 {
                0.0
            } else {
                f64::NAN
            };
            SummaryRow {
                method,
                kind,
                mean_mse: mean,
                std_mse: std,
                seeds: n,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["method", "kind", "param", "mean_mse", "std_mse", "seeds"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            r.kind.label().to_string(),
            fmt_f64(r.kind.param()),
            fmt_f64(r.mean_mse),
            fmt_f64(r.std_mse),
            r.seeds.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean MSE of `method` on `kind` across seeds, over successful rows.
pub fn mean_mse(rows: &[BenchRow], method: Method, kind: PrefixKind) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && kind_cmp(&r.kind, &kind) == Ordering::Equal && r.is_ok())
        .map(|r| r.mse)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 3.0], &[0.0, 1.0]).unwrap(), 2.5);
        assert!(matches!(
            mse(&[1.0], &[1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_scale(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_scale(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax_scale(&[1.0, 3.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn method_labels_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.label()).unwrap(), m);
        }
        assert!(Method::parse("fine-tuning").is_err());
    }

    fn tiny_config() -> BenchConfig {
        let mut cfg = BenchConfig::for_preset(Preset::Ci, 3);
        cfg.sizes = Sizes {
            n: 3,
            d: 3,
            m: 4,
            valid: 8,
            test: 8,
            seeds: 2,
        };
        cfg.seeds = vec![3, 4];
        cfg.kinds = vec![PrefixKind::Noisy { std: 0.5 }, PrefixKind::Random];
        cfg.ricl.outer_steps = 3;
        cfg.laricl.outer_steps = 3;
        cfg.oracle_inner.step_size = 0.05;
        cfg
    }

    #[test]
    fn rows_are_sorted_scaled_and_job_independent() {
        let cfg = tiny_config();
        let a = run_benchmark(&cfg, 1).unwrap();
        let b = run_benchmark(&cfg, 3).unwrap();
        assert_eq!(a.len(), 2 * 2 * 4);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_bench_csv(&a, &mut ca).unwrap();
        write_bench_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a[0].kind, PrefixKind::Random);
        assert!(a
            .iter()
            .all(|r| r.is_ok() && (0.0..=1.0).contains(&r.mse_scaled)));
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with(
            "method,kind,param,seed,mse,mse_scaled,status\nicl-uniform,random,0.0,3,"
        ));
    }

    #[test]
    fn summary_statistics() {
        let rows: Vec<BenchRow> = [1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, v)| BenchRow {
                method: Method::Ricl,
                kind: PrefixKind::Noisy { std: 0.2 },
                seed: i as u64,
                mse: *v,
                mse_scaled: 0.0,
                status: CellStatus::Ok,
                kept_initial: false,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_mse, 2.0);
        assert!((s[0].std_mse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            mean_mse(&rows, Method::Ricl, PrefixKind::Noisy { std: 0.2 }),
            Some(2.0)
        );
        assert_eq!(
            mean_mse(&rows, Method::Oracle, PrefixKind::Noisy { std: 0.2 }),
            None
        );
    }

    #[test]
    fn failed_cells_are_kept() {
        let mut cfg = tiny_config();
        cfg.kinds = vec![PrefixKind::Random];
        cfg.seeds = vec![1];
        let rows = run_benchmark(&cfg, 1).unwrap();
        assert_eq!(rows.len(), 4);
        let failed = BenchRow {
            status: CellStatus::Failed("boom".into()),
            mse: f64::NAN,
            ..rows[0].clone()
        };
        let mut all = rows.clone();
        all.push(failed);
        scale_groups(&mut all);
        assert!(all.last().unwrap().mse_scaled.is_nan());
        let mut buf = Vec::new();
        write_bench_csv(&all, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .ends_with(",NaN,NaN,failed: boom\n"));
    }
}
