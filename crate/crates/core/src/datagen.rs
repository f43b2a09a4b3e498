//! Synthetic tasks, corrupted prefixes and clean evaluation sets.
//!
//! For one seed every draw comes from a fixed stream per role (task,
//! prefix inputs, prefix noise, validation, test), so the cells of a sweep
//! share their random numbers and differ only in the corruption applied.

use std::fmt;

use crate::error::{Error, Result};
use crate::inner::Example;
use crate::linalg::Vector;
use crate::rng::RngStream;
use crate::softmax::softmax_predict;

const TASK_STREAM: u64 = 1;
const PREFIX_STREAM: u64 = 2;
const VALID_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;
const NOISE_TAG: u64 = 0x6e_6f69_7365;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub n: usize,
    pub d: usize,
    /// Number of prefix examples.
    pub m: usize,
    pub x_true: Vector,
}

/// Corruption applied to the prefix. Entries of `A_i` are drawn from
/// `N(mean, 1)`; noise is added to `b_i` with standard deviation `std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrefixKind {
    Random,
    Imbalanced { mean: f64 },
    Noisy { std: f64 },
    ImbalancedNoisy { mean: f64, std: f64 },
}

impl PrefixKind {
    /// The combined kind used in the reference experiments.
    pub const COMBINED: PrefixKind = PrefixKind::ImbalancedNoisy {
        mean: 0.4,
        std: 0.4,
    };

    pub fn mean(&self) -> f64 {
        match *self {
            PrefixKind::Imbalanced { mean } | PrefixKind::ImbalancedNoisy { mean, .. } => mean,
            _ => 0.0,
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            PrefixKind::Noisy { std } | PrefixKind::ImbalancedNoisy { std, .. } => std,
            _ => 0.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PrefixKind::Random => "random",
            PrefixKind::Imbalanced { .. } => "imbalanced",
            PrefixKind::Noisy { .. } => "noisy",
            PrefixKind::ImbalancedNoisy { .. } => "imbalanced-noisy",
        }
    }

    /// The swept parameter: the mean for imbalanced prefixes, otherwise the
    /// noise level, and 0 for clean random prefixes.
    pub fn param(&self) -> f64 {
        match *self {
            PrefixKind::Random => 0.0,
            PrefixKind::Imbalanced { mean } => mean,
            PrefixKind::Noisy { std } | PrefixKind::ImbalancedNoisy { std, .. } => std,
        }
    }

    /// Position in the canonical output order.
    pub fn rank(&self) -> u8 {
        match self {
            PrefixKind::Random => 0,
            PrefixKind::Imbalanced { .. } => 1,
            PrefixKind::Noisy { .. } => 2,
            PrefixKind::ImbalancedNoisy { .. } => 3,
        }
    }

    /// Inverse of [`PrefixKind::label`] plus parameters. The combined kind
    /// takes `mean` and `std`; the others take their single parameter.
    pub fn from_label(label: &str, params: &[f64]) -> Result<Self> {
        let want = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::Parse(format!(
                    "kind {label} takes {k} parameter(s), got {}",
                    params.len()
                )))
            }
        };
        let kind = match label {
            "random" => {
                want(0)?;
                PrefixKind::Random
            }
            "imbalanced" => {
                want(1)?;
                PrefixKind::Imbalanced { mean: params[0] }
            }
            "noisy" => {
                want(1)?;
                PrefixKind::Noisy { std: params[0] }
            }
            "imbalanced-noisy" => {
                want(2)?;
                PrefixKind::ImbalancedNoisy {
                    mean: params[0],
                    std: params[1],
                }
            }
            other => return Err(Error::Parse(format!("unknown prefix kind {other:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            PrefixKind::Random => vec![],
            PrefixKind::Imbalanced { mean } => vec![mean],
            PrefixKind::Noisy { std } => vec![std],
            PrefixKind::ImbalancedNoisy { mean, std } => vec![mean, std],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let std = self.std();
        if !(std >= 0.0) || !std.is_finite() || !self.mean().is_finite() {
            return Err(Error::InvalidConfig(format!(
                "invalid prefix kind {self:?}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PrefixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())?;
        for p in self.params() {
            write!(f, " {p}")?;
        }
        Ok(())
    }
}

/// `x_true ~ N(0, I_d)`
pub fn gen_task(n: usize, d: usize, m: usize, rng: &RngStream) -> Result<TaskSpec> {
    if n == 0 || d == 0 || m == 0 {
        return Err(Error::InvalidConfig(format!(
            "task sizes must be >= 1, got n={n} d={d} m={m}"
        )));
    }
    Ok(TaskSpec {
        n,
        d,
        m,
        x_true: rng.sampler().gauss_vector(d),
    })
}

/// `m` prefix examples of the given kind. Inputs and noise use separate
/// child streams, so a zero mean or zero noise reproduces `Random` exactly.
pub fn gen_examples(kind: PrefixKind, task: &TaskSpec, rng: &RngStream) -> Result<Vec<Example>> {
    kind.validate()?;
    let mut inputs = rng.sampler();
    let mut noise = rng.child(NOISE_TAG).sampler();
    let (mean, std) = (kind.mean(), kind.std());
    (0..task.m)
        .map(|_| {
            let mut a = inputs.gauss_matrix(task.n, task.d);
            if mean != 0.0 {
                a.data_mut().iter_mut().for_each(|v| *v += mean);
            }
            let mut b = softmax_predict(&a, &task.x_true);
            if std != 0.0 {
                b.iter_mut()
                    .for_each(|v| *v += std * noise.standard_normal());
            }
            Example::new(a, b)
        })
        .collect()
}

/// Clean pairs with `A ~ N(0, I)` entries and `b = f(A x_true)`.
pub fn gen_eval_set(count: usize, task: &TaskSpec, rng: &RngStream) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::InvalidConfig(
            "evaluation set size must be >= 1".into(),
        ));
    }
    let mut s = rng.sampler();
    (0..count)
        .map(|_| {
            let a = s.gauss_matrix(task.n, task.d);
            let b = softmax_predict(&a, &task.x_true);
            Example::new(a, b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessGrid {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// The eight-point mean and noise grids `0.2, 0.4, ..., 1.6`.
pub fn robustness_grid() -> RobustnessGrid {
    let grid = vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6];
    RobustnessGrid {
        means: grid.clone(),
        stds: grid,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Ci,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "ci" => Ok(Preset::Ci),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected paper or ci)"
            ))),
        }
    }

    pub fn sizes(&self) -> Sizes {
        match self {
            Preset::Paper => Sizes {
                n: 16,
                d: 16,
                m: 40,
                valid: 4000,
                test: 4000,
                seeds: 5,
            },
            Preset::Ci => Sizes {
                n: 8,
                d: 8,
                m: 20,
                valid: 200,
                test: 200,
                seeds: 5,
            },
        }
    }
}

/// Problem and evaluation sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sizes {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub valid: usize,
    pub test: usize,
    /// Seeds per cell in a benchmark.
    pub seeds: usize,
}

/// Everything one benchmark cell needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub kind: PrefixKind,
    pub task: TaskSpec,
    pub prefix: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// A pure function of `(seed, sizes, kind)`.
pub fn generate_dataset(seed: u64, sizes: &Sizes, kind: PrefixKind) -> Result<Dataset> {
    let task = gen_task(
        sizes.n,
        sizes.d,
        sizes.m,
        &RngStream::new(seed, TASK_STREAM),
    )?;
    Ok(Dataset {
        seed,
        kind,
        prefix: gen_examples(kind, &task, &RngStream::new(seed, PREFIX_STREAM))?,
        valid: gen_eval_set(sizes.valid, &task, &RngStream::new(seed, VALID_STREAM))?,
        test: gen_eval_set(sizes.test, &task, &RngStream::new(seed, TEST_STREAM))?,
        task,
    })
}

#[cfg(test)]
fn in_simplex(b: &[f64]) -> bool {
    (b.iter().sum::<f64>() - 1.0).abs() < 1e-12 && b.iter().all(|v| *v > 0.0 && *v < 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        gen_task(4, 4, 6, &RngStream::new(5, 1)).unwrap()
    }

    #[test]
    fn task_is_deterministic() {
        let s = RngStream::new(9, 1);
        assert_eq!(
            gen_task(16, 16, 40, &s).unwrap(),
            gen_task(16, 16, 40, &s).unwrap()
        );
        assert_eq!(gen_task(16, 16, 40, &s).unwrap().x_true.len(), 16);
        assert_eq!(gen_task(3, 1, 2, &s).unwrap().x_true.len(), 1);
    }

    #[test]
    fn zero_corruption_reproduces_random() {
        let t = task();
        let s = RngStream::new(5, 2);
        let random = gen_examples(PrefixKind::Random, &t, &s).unwrap();
        assert_eq!(
            gen_examples(PrefixKind::Noisy { std: 0.0 }, &t, &s).unwrap(),
            random
        );
        assert_eq!(
            gen_examples(PrefixKind::Imbalanced { mean: 0.0 }, &t, &s).unwrap(),
            random
        );
    }

    #[test]
    fn clean_targets_lie_in_simplex() {
        let t = task();
        let s = RngStream::new(5, 2);
        for kind in [PrefixKind::Random, PrefixKind::Imbalanced { mean: 1.2 }] {
            for e in gen_examples(kind, &t, &s).unwrap() {
                assert!(in_simplex(&e.b));
                assert!(e.b.norm() <= 1.0);
            }
        }
        for e in gen_eval_set(10, &t, &s).unwrap() {
            assert!(in_simplex(&e.b));
        }
    }

    #[test]
    fn noise_leaves_the_simplex() {
        let t = task();
        let ex = gen_examples(PrefixKind::Noisy { std: 0.8 }, &t, &RngStream::new(5, 2)).unwrap();
        assert!(ex.iter().any(|e| !in_simplex(&e.b)));
    }

    #[test]
    fn imbalanced_inputs_are_shifted() {
        let t = task();
        let s = RngStream::new(5, 2);
        let base = gen_examples(PrefixKind::Random, &t, &s).unwrap();
        let shifted = gen_examples(PrefixKind::Imbalanced { mean: 0.8 }, &t, &s).unwrap();
        for (u, v) in base.iter().zip(&shifted) {
            for (x, y) in u.a.data().iter().zip(v.a.data()) {
                assert_eq!(*y, x + 0.8);
            }
        }
    }

    #[test]
    fn grids_and_presets() {
        let g = robustness_grid();
        assert_eq!(g.stds, vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6]);
        assert_eq!(g.means, g.stds);
        assert_eq!(Preset::Paper.sizes().valid, 4000);
        assert_eq!(Preset::Ci.sizes().valid, 200);
        assert_eq!(PrefixKind::COMBINED.mean(), 0.4);
        assert_eq!(PrefixKind::COMBINED.std(), 0.4);
    }

    #[test]
    fn dataset_is_pure_and_roles_differ() {
        let sizes = Sizes {
            n: 3,
            d: 3,
            m: 4,
            valid: 5,
            test: 5,
            seeds: 1,
        };
        let a = generate_dataset(11, &sizes, PrefixKind::Noisy { std: 0.3 }).unwrap();
        assert_eq!(
            a,
            generate_dataset(11, &sizes, PrefixKind::Noisy { std: 0.3 }).unwrap()
        );
        assert_ne!(a.valid, a.test);
        assert!(a.valid.iter().all(|v| a.prefix.iter().all(|p| p.a != v.a)));
        let other = generate_dataset(11, &sizes, PrefixKind::Random).unwrap();
        assert_eq!(other.valid, a.valid);
        assert_eq!(other.task, a.task);
    }

    #[test]
    fn labels_roundtrip() {
        for kind in [
            PrefixKind::Random,
            PrefixKind::Imbalanced { mean: 0.6 },
            PrefixKind::Noisy { std: 1.4 },
            PrefixKind::COMBINED,
        ] {
            assert_eq!(
                PrefixKind::from_label(kind.label(), &kind.params()).unwrap(),
                kind
            );
        }
        assert!(PrefixKind::from_label("noisy", &[-1.0]).is_err());
        assert!(PrefixKind::from_label("shuffled", &[]).is_err());
    }

    #[test]
    fn empty_eval_set_rejected() {
        assert!(gen_eval_set(0, &task(), &RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn matrix_sizes() {
        let ex = gen_examples(PrefixKind::Random, &task(), &RngStream::new(1, 1)).unwrap();
        assert_eq!(ex.len(), 6);
        assert!(ex.iter().all(|e| e.a.shape() == (4, 4)));
    }
}
