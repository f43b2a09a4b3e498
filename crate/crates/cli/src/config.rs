//! Flat `key = value` run configuration.
//!
//! Values are layered: preset defaults, then the config file, then flags.
//! Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::path::Path;

use ricl_core::bench::{BenchConfig, LariclSelection, Method};
use ricl_core::datagen::{PrefixKind, Preset, Sizes};
use ricl_core::inner::Ridge;
use ricl_core::reweight::RegForm;
use ricl_core::ricl::{
    MetaMethod, Mode, RiclConfig, StepRule, Surrogate, WeightInit, WeightProjection,
};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PresetArg {
    Paper,
    Ci,
    Custom,
}

/// Every key the config layer understands, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("n", "rows per example"),
    ("d", "model width (defaults to n)"),
    ("m", "prefix length"),
    ("valid", "validation set size"),
    ("test", "test set size"),
    ("seeds", "seeds per benchmark cell"),
    ("kind", "random | imbalanced | noisy | imbalanced-noisy"),
    ("mean", "input mean for imbalanced kinds"),
    ("std", "target noise for noisy kinds"),
    ("methods", "comma-separated benchmark methods"),
    ("inner.steps", "inner gradient steps"),
    ("inner.step_size", "inner step size"),
    ("inner.tol", "inner gradient tolerance"),
    ("ricl.mode", "scalar | transformer"),
    ("ricl.steps", "outer steps"),
    ("ricl.lr", "outer learning rate"),
    (
        "ricl.meta",
        "lookahead | unrolled | fd-lookahead | fd-pipeline",
    ),
    ("ricl.eta", "lookahead step"),
    ("ricl.unroll", "unrolled inner steps"),
    ("ricl.fd_h", "finite-difference step"),
    ("ricl.step_rule", "fixed | backtracking"),
    ("ricl.max_halvings", "backtracking budget"),
    ("ricl.batch", "validation minibatch size (0 = all)"),
    ("ricl.gamma", "regularizer weight (transformer mode)"),
    ("ricl.reg_form", "lifted | printed"),
    ("ricl.projection", "none | nonnegative"),
    ("ricl.init", "ones | gaussian"),
    ("laricl.steps", "outer steps"),
    ("laricl.lr", "outer learning rate"),
    ("laricl.ridge", "off | fallback | <value>"),
    ("laricl.selection", "final | best-validation"),
    ("oracle.steps", "oracle inner steps"),
    ("oracle.step_size", "oracle inner step size"),
    ("jobs", "worker threads"),
];

/// Resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bench: BenchConfig,
    pub kind: PrefixKind,
    pub jobs: usize,
}

impl RunConfig {
    pub fn sizes(&self) -> Sizes {
        self.bench.sizes
    }
}

/// Parses config file text into ordered `(line, key, value)` entries.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` flag.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

/// Accumulates layered values before they are resolved.
#[derive(Debug, Default)]
struct Layer {
    values: BTreeMap<String, String>,
}

impl Layer {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(format!("unknown config key {key:?}"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        self.get(key).map(|v| num(key, v)).transpose()
    }
}

fn preset_base(preset: PresetArg, seed: u64, layer: &Layer) -> Result<BenchConfig, String> {
    match preset {
        PresetArg::Paper => Ok(BenchConfig::for_preset(Preset::Paper, seed)),
        PresetArg::Ci => Ok(BenchConfig::for_preset(Preset::Ci, seed)),
        PresetArg::Custom => {
            for key in ["n", "m", "valid", "test"] {
                if layer.get(key).is_none() {
                    return Err(format!("preset custom requires {key}"));
                }
            }
            Ok(BenchConfig::for_preset(Preset::Ci, seed))
        }
    }
}

fn meta_method(layer: &Layer, cfg: &RiclConfig) -> Result<MetaMethod, String> {
    let eta = layer.parse::<f64>("ricl.eta")?;
    let h = layer.parse::<f64>("ricl.fd_h")?.unwrap_or(1e-5);
    let current_eta = match cfg.meta_method {
        MetaMethod::OneStepLookahead { eta } => eta,
        _ => 1.0,
    };
    let eta = eta.unwrap_or(current_eta);
    let unroll = layer
        .parse::<usize>("ricl.unroll")?
        .unwrap_or(cfg.inner.max_steps);
    Ok(match layer.get("ricl.meta") {
        None => match cfg.meta_method {
            MetaMethod::OneStepLookahead { .. } => MetaMethod::OneStepLookahead { eta },
            MetaMethod::Unrolled { .. } => MetaMethod::Unrolled { steps: unroll },
            other => other,
        },
        Some("lookahead") => MetaMethod::OneStepLookahead { eta },
        Some("unrolled") => MetaMethod::Unrolled { steps: unroll },
        Some("fd-lookahead") => MetaMethod::FiniteDifference {
            h,
            of: Surrogate::Lookahead { eta },
        },
        Some("fd-pipeline") => MetaMethod::FiniteDifference {
            h,
            of: Surrogate::Pipeline,
        },
        Some(other) => return Err(format!("ricl.meta: unknown method {other:?}")),
    })
}

fn resolve(preset: PresetArg, seed: u64, layer: &Layer) -> Result<RunConfig, String> {
    let mut b = preset_base(preset, seed, layer)?;

    let mut sizes = b.sizes;
    if let Some(n) = layer.parse("n")? {
        sizes.n = n;
        sizes.d = n;
    }
    if let Some(d) = layer.parse("d")? {
        sizes.d = d;
    }
    sizes.m = layer.parse("m")?.unwrap_or(sizes.m);
    sizes.valid = layer.parse("valid")?.unwrap_or(sizes.valid);
    sizes.test = layer.parse("test")?.unwrap_or(sizes.test);
    sizes.seeds = layer.parse("seeds")?.unwrap_or(sizes.seeds);
    if [
        sizes.n,
        sizes.d,
        sizes.m,
        sizes.valid,
        sizes.test,
        sizes.seeds,
    ]
    .contains(&0)
    {
        return Err("sizes and seed count must be >= 1".into());
    }
    let size_changed = sizes != b.sizes;
    b.sizes = sizes;
    b.seeds = (0..sizes.seeds as u64)
        .map(|k| seed.wrapping_add(k))
        .collect();

    if let Some(list) = layer.get("methods") {
        b.methods = list
            .split(',')
            .map(|s| Method::parse(s.trim()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
    }

    b.inner.max_steps = layer.parse("inner.steps")?.unwrap_or(b.inner.max_steps);
    b.inner.step_size = layer.parse("inner.step_size")?.unwrap_or(b.inner.step_size);
    b.inner.grad_tol = layer.parse("inner.tol")?.unwrap_or(b.inner.grad_tol);
    if size_changed || layer.get("inner.step_size").is_some() {
        b.oracle_inner.step_size = b.inner.step_size * sizes.m as f64 / sizes.valid as f64;
    }
    b.oracle_inner.max_steps = layer
        .parse("oracle.steps")?
        .unwrap_or(b.oracle_inner.max_steps);
    b.oracle_inner.step_size = layer
        .parse("oracle.step_size")?
        .unwrap_or(b.oracle_inner.step_size);

    let r = &mut b.ricl;
    r.inner = b.inner.clone();
    if let Some(mode) = layer.get("ricl.mode") {
        r.mode = match mode {
            "scalar" => Mode::Scalar,
            "transformer" => Mode::Transformer,
            other => return Err(format!("ricl.mode: unknown mode {other:?}")),
        };
        r.init = RiclConfig::new(r.mode).init;
    }
    r.outer_steps = layer.parse("ricl.steps")?.unwrap_or(r.outer_steps);
    r.outer_lr = layer.parse("ricl.lr")?.unwrap_or(r.outer_lr);
    r.meta_method = meta_method(layer, r)?;
    let halvings = layer.parse::<u32>("ricl.max_halvings")?;
    r.step_rule = match (layer.get("ricl.step_rule"), r.step_rule) {
        (Some("fixed"), _) => StepRule::Fixed,
        (Some("backtracking"), _) | (None, StepRule::Backtracking { .. }) => {
            StepRule::Backtracking {
                max_halvings: halvings.unwrap_or(match r.step_rule {
                    StepRule::Backtracking { max_halvings } => max_halvings,
                    StepRule::Fixed => 30,
                }),
            }
        }
        (None, StepRule::Fixed) => StepRule::Fixed,
        (Some(other), _) => return Err(format!("ricl.step_rule: unknown rule {other:?}")),
    };
    if let Some(batch) = layer.parse::<usize>("ricl.batch")? {
        r.batch_size = (batch > 0).then_some(batch);
    }
    r.reg.gamma = layer.parse("ricl.gamma")?.unwrap_or(r.reg.gamma);
    if let Some(form) = layer.get("ricl.reg_form") {
        r.reg.form = match form {
            "lifted" => RegForm::Lifted,
            "printed" => RegForm::Printed,
            other => return Err(format!("ricl.reg_form: unknown form {other:?}")),
        };
    }
    if let Some(p) = layer.get("ricl.projection") {
        r.weight_projection = match p {
            "none" => WeightProjection::None,
            "nonnegative" => WeightProjection::NonNegative,
            other => return Err(format!("ricl.projection: unknown projection {other:?}")),
        };
    }
    if let Some(init) = layer.get("ricl.init") {
        r.init = match init {
            "ones" => WeightInit::Ones,
            "gaussian" => WeightInit::Gaussian,
            other => return Err(format!("ricl.init: unknown init {other:?}")),
        };
    }
    r.seed = seed;

    let l = &mut b.laricl;
    l.outer_steps = layer.parse("laricl.steps")?.unwrap_or(l.outer_steps);
    l.outer_lr = layer.parse("laricl.lr")?.unwrap_or(l.outer_lr);
    if let Some(ridge) = layer.get("laricl.ridge") {
        l.ridge = match ridge {
            "off" => Ridge::Off,
            "fallback" => Ridge::Fallback,
            v => Ridge::Fixed(num("laricl.ridge", v)?),
        };
    }
    if let Some(sel) = layer.get("laricl.selection") {
        b.laricl_selection = match sel {
            "final" => LariclSelection::Final,
            "best-validation" => LariclSelection::BestValidation,
            other => return Err(format!("laricl.selection: unknown rule {other:?}")),
        };
    }

    let mean = layer.parse::<f64>("mean")?;
    let std = layer.parse::<f64>("std")?;
    let label = layer.get("kind").unwrap_or("noisy");
    let params = match label {
        "random" => vec![],
        "imbalanced" => vec![mean.unwrap_or(0.8)],
        "noisy" => vec![std.unwrap_or(0.8)],
        "imbalanced-noisy" => vec![
            mean.unwrap_or(PrefixKind::COMBINED.mean()),
            std.unwrap_or(PrefixKind::COMBINED.std()),
        ],
        other => return Err(format!("kind: unknown prefix kind {other:?}")),
    };
    let kind = PrefixKind::from_label(label, &params).map_err(|e| e.to_string())?;
    let jobs = layer.parse::<usize>("jobs")?.unwrap_or(1).max(1);

    b.validate().map_err(|e| e.to_string())?;
    Ok(RunConfig {
        bench: b,
        kind,
        jobs,
    })
}

/// Merges preset defaults, the optional config file and flag assignments,
/// in increasing priority.
pub fn build_run_config(
    preset: PresetArg,
    seed: u64,
    config_file: Option<&Path>,
    flags: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut layer = Layer::default();
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (line, k, v) in parse_config(&text)? {
            layer
                .set(&k, &v)
                .map_err(|e| CliError::Config(format!("{} line {line}: {e}", path.display())))?;
        }
    }
    for (k, v) in flags {
        layer.set(k, v).map_err(CliError::Usage)?;
    }
    resolve(preset, seed, &layer).map_err(CliError::Config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn preset_defaults() {
        let c = build_run_config(PresetArg::Ci, 7, None, &[]).unwrap();
        assert_eq!(c.sizes(), Preset::Ci.sizes());
        assert_eq!(c.bench.seeds, vec![7, 8, 9, 10, 11]);
        assert_eq!(c.kind, PrefixKind::Noisy { std: 0.8 });
        assert_eq!(c.jobs, 1);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# sizes\nm = 12\nricl.steps = 7\n\nkind = imbalanced\n",
        )
        .unwrap();
        let c = build_run_config(
            PresetArg::Ci,
            1,
            Some(&path),
            &flags(&[("ricl.steps", "3")]),
        )
        .unwrap();
        assert_eq!(c.sizes().m, 12);
        assert_eq!(c.bench.ricl.outer_steps, 3);
        assert_eq!(c.kind, PrefixKind::Imbalanced { mean: 0.8 });
    }

    #[test]
    fn custom_requires_sizes() {
        assert!(matches!(
            build_run_config(PresetArg::Custom, 1, None, &[]),
            Err(CliError::Config(_))
        ));
        let c = build_run_config(
            PresetArg::Custom,
            1,
            None,
            &flags(&[("n", "3"), ("m", "4"), ("valid", "10"), ("test", "10")]),
        )
        .unwrap();
        assert_eq!((c.sizes().n, c.sizes().d), (3, 3));
    }

    #[test]
    fn bad_entries() {
        assert!(matches!(
            build_run_config(PresetArg::Ci, 1, None, &flags(&[("bogus", "1")])),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            build_run_config(PresetArg::Ci, 1, None, &flags(&[("ricl.lr", "fast")])),
            Err(CliError::Config(_))
        ));
        assert!(parse_config("no equals sign").is_err());
    }

    #[test]
    fn meta_method_selection() {
        let c = build_run_config(
            PresetArg::Ci,
            1,
            None,
            &flags(&[("ricl.meta", "lookahead"), ("ricl.eta", "0.5")]),
        )
        .unwrap();
        assert_eq!(
            c.bench.ricl.meta_method,
            MetaMethod::OneStepLookahead { eta: 0.5 }
        );
        let c = build_run_config(PresetArg::Ci, 1, None, &flags(&[("inner.steps", "40")])).unwrap();
        assert_eq!(c.bench.ricl.meta_method, MetaMethod::Unrolled { steps: 40 });
        let c = build_run_config(PresetArg::Ci, 1, None, &flags(&[("ricl.unroll", "10")])).unwrap();
        assert_eq!(c.bench.ricl.meta_method, MetaMethod::Unrolled { steps: 10 });
    }

    #[test]
    fn every_key_is_accepted() {
        let mut layer = Layer::default();
        for (k, _) in KEYS {
            layer.set(k, "1").unwrap();
        }
    }
}
