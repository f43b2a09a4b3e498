//! Command-line front end for the `ricl` experiments.

pub mod config;
pub mod error;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use ricl_core::bench::{
    robustness_sweep, run_benchmark, summarize, test_mse, write_bench_csv, write_summary_csv,
    BenchRow,
};
use ricl_core::datagen::{generate_dataset, Dataset, Preset};
use ricl_core::dataset::{export_csv, write_dataset};
use ricl_core::inner::solve_weighted_softmax;
use ricl_core::laricl::laricl_train;
use ricl_core::ricl::{inner_solution, ricl_train};
use ricl_core::trace::fmt_f64;
use ricl_core::verify::{self, CheckResult};

use config::{build_run_config, parse_assignment, PresetArg, RunConfig};
use error::CliError;
use plot::{collect_series, read_bench_csv, render_svg, PlotSpec, YColumn};

#[derive(Debug, Parser)]
#[command(
    name = "ricl",
    version,
    about = "Prefix reweighting experiments for softmax-regression in-context learning"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one dataset (text dump and CSV).
    Gen(RunArgs),
    /// Learn prefix weights by descending the validation loss.
    TrainRicl(RunArgs),
    /// Learn weights for the closed-form linear model.
    TrainLaricl(RunArgs),
    /// Compare methods on the four prefix kinds.
    Bench(RunArgs),
    /// Run the comparison over the mean and noise grids.
    Sweep(RunArgs),
    /// Run every property check; exits 0 only if all pass.
    Verify(RunArgs),
    /// Render an SVG chart from a bench or sweep CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "ci")]
    preset: PresetArg,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = "RICL_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Worker threads for bench and sweep.
    #[arg(long)]
    jobs: Option<usize>,
    /// Prefix kind for gen and train commands.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    mean: Option<f64>,
    #[arg(long)]
    std: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut flags = self.set.clone();
        let typed = [
            ("jobs", self.jobs.map(|v| v.to_string())),
            ("kind", self.kind.clone()),
            ("mean", self.mean.map(|v| v.to_string())),
            ("std", self.std.map(|v| v.to_string())),
        ];
        flags.extend(
            typed
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
        );
        build_run_config(self.preset, self.seed, self.config.as_deref(), &flags)
    }

    fn dataset(&self, cfg: &RunConfig) -> Result<Dataset, CliError> {
        Ok(generate_dataset(self.seed, &cfg.sizes(), cfg.kind)?)
    }
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Bench or sweep CSV to read.
    #[arg(long)]
    csv: PathBuf,
    /// Prefix kind label to plot.
    #[arg(long)]
    kind: String,
    /// Comma-separated methods (default: all).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, value_enum, default_value = "mse")]
    y: YColumn,
    #[arg(long)]
    log_y: bool,
    #[arg(long)]
    title: Option<String>,
    #[arg(long, env = "RICL_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// File name inside the output directory.
    #[arg(long)]
    name: Option<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> ricl_core::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn weights_csv(values: &[f64]) -> Vec<u8> {
    let mut s = String::from("index,value\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", fmt_f64(*v)));
    }
    s.into_bytes()
}

fn cmd_gen(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let ds = args.dataset(&cfg)?;
    write_file(
        &args.out.join("dataset.txt"),
        &to_bytes(|b| write_dataset(&ds, b))?,
    )?;
    write_file(
        &args.out.join("dataset.csv"),
        &to_bytes(|b| export_csv(&ds, b))?,
    )
}

fn cmd_train_ricl(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let ds = args.dataset(&cfg)?;
    let out = ricl_train(&ds.prefix, &ds.valid, &cfg.bench.ricl)?;
    write_file(
        &args.out.join("ricl_trace.csv"),
        out.trace.to_csv_string().as_bytes(),
    )?;
    write_file(
        &args.out.join("ricl_params.csv"),
        &weights_csv(&out.params.to_flat()),
    )?;
    let trained = test_mse(
        &ds.test,
        &inner_solution(&out.params, &ds.prefix, &cfg.bench.ricl.inner)?,
    )?;
    let uniform = vec![1.0; ds.prefix.len()];
    let baseline = test_mse(
        &ds.test,
        &solve_weighted_softmax(&ds.prefix, &uniform, &cfg.bench.inner)?.x_star,
    )?;
    println!("test mse: ricl {trained:.6e}, uniform weights {baseline:.6e}");
    Ok(())
}

fn cmd_train_laricl(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let ds = args.dataset(&cfg)?;
    let out = laricl_train(&ds.prefix, &ds.valid, &cfg.bench.laricl)?;
    write_file(
        &args.out.join("laricl_trace.csv"),
        out.trace.to_csv_string().as_bytes(),
    )?;
    write_file(&args.out.join("laricl_weights.csv"), &weights_csv(&out.w))?;
    let losses = out.trace.losses();
    println!(
        "linear validation loss: start {:.6e}, end {:.6e}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_bench_outputs(out: &Path, stem: &str, rows: &[BenchRow]) -> Result<(), CliError> {
    write_file(
        &out.join(format!("{stem}.csv")),
        &to_bytes(|b| write_bench_csv(rows, b))?,
    )?;
    write_file(
        &out.join(format!("{stem}_summary.csv")),
        &to_bytes(|b| write_summary_csv(&summarize(rows), b))?,
    )?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed; see the status column");
    }
    Ok(())
}

fn cmd_bench(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let rows = run_benchmark(&cfg.bench, cfg.jobs)?;
    write_bench_outputs(&args.out, "bench", &rows)
}

fn cmd_sweep(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let rows = robustness_sweep(&cfg.bench, cfg.jobs)?;
    write_bench_outputs(&args.out, "sweep", &rows)
}

/// Properties of the command layer itself.
fn cli_checks(seed: u64) -> Vec<CheckResult> {
    let pure = || -> Result<bool, CliError> {
        let cfg = build_run_config(PresetArg::Ci, seed, None, &[])?;
        let gen =
            || to_bytes(|b| write_dataset(&generate_dataset(seed, &cfg.sizes(), cfg.kind)?, b));
        let csv = "method,kind,param,seed,mse,mse_scaled,status\nricl,noisy,0.8,1,0.1,0.0,ok\nicl-uniform,noisy,0.8,1,0.2,1.0,ok\n";
        let spec = PlotSpec {
            kind: "noisy".into(),
            methods: vec![],
            y: YColumn::Mse,
            log_y: false,
            title: "check".into(),
        };
        let svg = || -> Result<String, CliError> {
            Ok(render_svg(
                &collect_series(&read_bench_csv(csv.as_bytes())?, &spec)?,
                &spec,
            ))
        };
        Ok(gen()? == gen()? && svg()? == svg()?)
    };
    let precedence = || -> Result<bool, CliError> {
        let dir = std::env::temp_dir().join(format!("ricl-verify-{}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join("precedence.cfg");
        fs::write(&path, "m = 11\nricl.steps = 9\n").map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let flags = vec![("ricl.steps".to_string(), "4".to_string())];
        let cfg = build_run_config(PresetArg::Ci, seed, Some(&path), &flags);
        let _ = fs::remove_dir_all(&dir);
        let cfg = cfg?;
        let preset = Preset::Ci.sizes();
        Ok(cfg.sizes().m == 11
            && cfg.bench.ricl.outer_steps == 4
            && cfg.sizes().valid == preset.valid)
    };
    let as_check = |name: &'static str, r: Result<bool, CliError>, ok: &str| match r {
        Ok(passed) => CheckResult {
            name,
            passed,
            detail: if passed {
                ok.to_string()
            } else {
                "mismatch".to_string()
            },
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    };
    vec![
        as_check(
            "cli.commands_are_pure",
            pure(),
            "dataset and plot bytes repeat exactly",
        ),
        as_check(
            "cli.config_precedence",
            precedence(),
            "flags > config file > preset",
        ),
    ]
}

fn cmd_verify(args: &RunArgs) -> Result<(), CliError> {
    // Rejects bad flags even though the suite uses fixed settings.
    args.resolve()?;
    let preset = match args.preset {
        PresetArg::Paper => Preset::Paper,
        _ => Preset::Ci,
    };
    let line = |r: &CheckResult| {
        format!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        )
    };
    let ctx = verify::Context::new(preset, args.seed);
    let mut results = verify::run_suite(&ctx, |r| println!("{}", line(r)));
    for r in cli_checks(args.seed) {
        println!("{}", line(&r));
        results.push(r);
    }
    let report: String = results.iter().map(|r| line(r) + "\n").collect();
    write_file(&args.out.join("verify.txt"), report.as_bytes())?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} properties passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} propert{} failed",
            if failed == 1 { "y" } else { "ies" }
        )));
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let file = fs::File::open(&args.csv).map_err(|source| CliError::Io {
        path: args.csv.display().to_string(),
        source,
    })?;
    let rows = read_bench_csv(file)?;
    let methods = args
        .methods
        .iter()
        .map(|m| {
            ricl_core::bench::Method::parse(m.trim()).map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = PlotSpec {
        kind: args.kind.clone(),
        methods,
        y: args.y,
        log_y: args.log_y,
        title: args
            .title
            .clone()
            .unwrap_or_else(|| format!("{} prefixes", args.kind)),
    };
    let svg = render_svg(&collect_series(&rows, &spec)?, &spec);
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("plot-{}.svg", args.kind));
    write_file(&args.out.join(name), svg.as_bytes())
}

/// The names `verify` reports, including the command-layer checks.
pub fn verify_property_names() -> Vec<&'static str> {
    let mut names = verify::property_names();
    names.extend(["cli.commands_are_pure", "cli.config_precedence"]);
    names
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainRicl(a) => cmd_train_ricl(a),
        Command::TrainLaricl(a) => cmd_train_laricl(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}
