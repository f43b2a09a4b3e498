//! Static SVG line charts from bench CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use ricl_core::bench::{Method, BENCH_HEADER};

use crate::error::CliError;

/// One parsed row of a bench CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub method: Method,
    pub kind: String,
    pub param: f64,
    pub seed: u64,
    pub mse: f64,
    pub mse_scaled: f64,
    pub status: String,
}

/// Reads a bench CSV, checking the header and every field.
pub fn read_bench_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| CliError::Schema(e.to_string()))?;
    if header.iter().ne(BENCH_HEADER.iter().copied()) {
        return Err(CliError::Schema(format!(
            "header {:?}, expected {}",
            header.iter().collect::<Vec<_>>(),
            BENCH_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Schema(format!("line {line}: {e}")))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let float = |k: usize| -> Result<f64, CliError> {
            field(k).parse().map_err(|_| {
                CliError::Schema(format!(
                    "line {line}: {} is not a number: {:?}",
                    BENCH_HEADER[k],
                    field(k)
                ))
            })
        };
        rows.push(CsvRow {
            method: Method::parse(field(0))
                .map_err(|e| CliError::Schema(format!("line {line}: {e}")))?,
            kind: field(1).to_string(),
            param: float(2)?,
            seed: field(3)
                .parse()
                .map_err(|_| CliError::Schema(format!("line {line}: bad seed {:?}", field(3))))?,
            mse: float(4)?,
            mse_scaled: float(5)?,
            status: field(6).to_string(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum YColumn {
    Mse,
    MseScaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub kind: String,
    /// Empty means every method present.
    pub methods: Vec<Method>,
    pub y: YColumn,
    pub log_y: bool,
    pub title: String,
}

/// Mean of the chosen column across seeds, per method and parameter.
pub type Series = BTreeMap<Method, Vec<(f64, f64)>>;

pub fn collect_series(rows: &[CsvRow], spec: &PlotSpec) -> Result<Series, CliError> {
    let mut acc: BTreeMap<Method, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        if r.kind != spec.kind
            || r.status != "ok"
            || !(spec.methods.is_empty() || spec.methods.contains(&r.method))
        {
            continue;
        }
        let y = match spec.y {
            YColumn::Mse => r.mse,
            YColumn::MseScaled => r.mse_scaled,
        };
        if !y.is_finite() || (spec.log_y && y <= 0.0) {
            continue;
        }
        // Keyed by bit pattern so equal parameters group exactly.
        let slot = acc
            .entry(r.method)
            .or_default()
            .entry(r.param.to_bits())
            .or_insert((r.param, 0.0, 0));
        slot.1 += y;
        slot.2 += 1;
    }
    let series: Series = acc
        .into_iter()
        .map(|(m, pts)| {
            let mut v: Vec<(f64, f64)> = pts
                .into_values()
                .map(|(x, s, c)| (x, s / c as f64))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, v)
        })
        .collect();
    if series.is_empty() {
        return Err(CliError::EmptySeries(format!("kind {:?}", spec.kind)));
    }
    Ok(series)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn color(m: Method) -> &'static str {
    match m {
        Method::IclUniform => "#1f77b4",
        Method::Ricl => "#d62728",
        Method::Laricl => "#2ca02c",
        Method::Oracle => "#7f7f7f",
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = if lo == 0.0 { 0.5 } else { 0.5 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Renders one chart: x is the corruption parameter, y the mean error.
pub fn render_svg(series: &Series, spec: &PlotSpec) -> String {
    let ty = |v: f64| if spec.log_y { v.log10() } else { v };
    let pts = series.values().flatten();
    let (x_lo, x_hi) = pts
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let (y_lo, y_hi) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(ty(p.1)), b.max(ty(p.1)))
    });
    let (x_lo, x_hi) = padded(x_lo, x_hi);
    let (y_lo, y_hi) = padded(y_lo, y_hi);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| TOP + (y_hi - ty(y)) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&spec.title)
    );
    let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = x_lo + t * (x_hi - x_lo);
        let px = sx(xv);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#,
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#,
            y0 + 16.0
        );
        let yv = y_lo + t * (y_hi - y_lo);
        let py = y0 - t * plot_h;
        let label = if spec.log_y {
            format!("1e{yv:.1}")
        } else {
            format!("{yv:.3e}")
        };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/>"#,
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            x0 - 6.0,
            py + 4.0
        );
    }
    let y_name = match spec.y {
        YColumn::Mse => "test MSE",
        YColumn::MseScaled => "min-max scaled MSE",
    };
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{} parameter</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(&spec.kind)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{y_name}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, (m, pts)) in series.iter().enumerate() {
        let c = color(*m);
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                sx(*x),
                sy(*y)
            );
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            m.label()
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "method,kind,param,seed,mse,mse_scaled,status
icl-uniform,noisy,0.2,1,0.5,1.0,ok
ricl,noisy,0.2,1,0.1,0.0,ok
icl-uniform,noisy,0.4,1,0.7,1.0,ok
ricl,noisy,0.4,1,NaN,NaN,failed: boom
";

    fn spec(kind: &str) -> PlotSpec {
        PlotSpec {
            kind: kind.into(),
            methods: vec![],
            y: YColumn::Mse,
            log_y: false,
            title: "t".into(),
        }
    }

    #[test]
    fn parses_and_groups() {
        let rows = read_bench_csv(CSV.as_bytes()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[3].mse.is_nan());
        let s = collect_series(&rows, &spec("noisy")).unwrap();
        assert_eq!(s[&Method::IclUniform], vec![(0.2, 0.5), (0.4, 0.7)]);
        assert_eq!(s[&Method::Ricl], vec![(0.2, 0.1)]);
    }

    #[test]
    fn empty_filter_is_an_error() {
        let rows = read_bench_csv(CSV.as_bytes()).unwrap();
        assert!(matches!(
            collect_series(&rows, &spec("random")),
            Err(CliError::EmptySeries(_))
        ));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(
            read_bench_csv("a,b\n1,2\n".as_bytes()),
            Err(CliError::Schema(_))
        ));
        let bad = CSV.replace("0.5,1.0", "half,1.0");
        assert!(matches!(
            read_bench_csv(bad.as_bytes()),
            Err(CliError::Schema(_))
        ));
        let bad = CSV.replace("ricl,noisy,0.2", "sgd,noisy,0.2");
        assert!(matches!(
            read_bench_csv(bad.as_bytes()),
            Err(CliError::Schema(_))
        ));
    }

    #[test]
    fn single_point_has_one_mark_and_axes() {
        let rows = read_bench_csv(
            "method,kind,param,seed,mse,mse_scaled,status\noracle,random,0.0,1,0.25,0.0,ok\n"
                .as_bytes(),
        )
        .unwrap();
        let sp = spec("random");
        let svg = render_svg(&collect_series(&rows, &sp).unwrap(), &sp);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert!(svg.contains("<line x1=\"70.00\" y1=\"350.00\""));
        assert!(svg.ends_with("</svg>\n"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let rows = read_bench_csv(CSV.as_bytes()).unwrap();
        let sp = PlotSpec {
            log_y: true,
            ..spec("noisy")
        };
        let a = render_svg(&collect_series(&rows, &sp).unwrap(), &sp);
        let b = render_svg(&collect_series(&rows, &sp).unwrap(), &sp);
        assert_eq!(a, b);
    }
}
