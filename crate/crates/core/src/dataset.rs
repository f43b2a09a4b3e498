//! Plain-text dataset dump and CSV export.
//!
//! Format version 1, one record per line, whitespace separated:
//!
//! ```text
//! ricl-dataset 1
//! seed <u64>
//! kind <label> [params...]
//! shape <n> <d>
//! x_true <d values>
//! role <prefix|valid|test> <count>
//! A <d values>      (n lines per example)
//! b <n values>
//! ```
//!
//! Floats use the shortest representation that reads back to the same bits.

use std::io::{BufRead, Write};

use crate::datagen::{Dataset, PrefixKind, TaskSpec};
use crate::error::{Error, Result};
use crate::inner::Example;
use crate::linalg::{Matrix, Vector};
use crate::trace::fmt_f64;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ricl-dataset";

const ROLES: [&str; 3] = ["prefix", "valid", "test"];

fn roles(ds: &Dataset) -> [&[Example]; 3] {
    [&ds.prefix, &ds.valid, &ds.test]
}

fn write_values<W: Write>(out: &mut W, tag: &str, values: &[f64]) -> Result<()> {
    write!(out, "{tag}")?;
    for v in values {
        write!(out, " {}", fmt_f64(*v))?;
    }
    writeln!(out)?;
    Ok(())
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(out, "seed {}", ds.seed)?;
    write!(out, "kind {}", ds.kind.label())?;
    for p in ds.kind.params() {
        write!(out, " {}", fmt_f64(p))?;
    }
    writeln!(out)?;
    writeln!(out, "shape {} {}", ds.task.n, ds.task.d)?;
    write_values(&mut out, "x_true", &ds.task.x_true)?;
    for (role, set) in ROLES.iter().zip(roles(ds)) {
        writeln!(out, "role {role} {}", set.len())?;
        for e in set {
            for r in 0..e.a.rows() {
                write_values(&mut out, "A", e.a.row(r))?;
            }
            write_values(&mut out, "b", &e.b)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("dataset text is ASCII")
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Parse(format!("line {}: {msg}", self.line_no))
    }

    /// Next line split into its tag and the remaining fields.
    fn record(&mut self, tag: &str) -> Result<Vec<String>> {
        let line = match self.inner.next() {
            Some(l) => l?,
            None => {
                return Err(Error::Parse(format!(
                    "unexpected end of input, expected {tag:?}"
                )))
            }
        };
        self.line_no += 1;
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some(t) if t == tag => Ok(fields.map(str::to_owned).collect()),
            other => Err(self.err(format!("expected {tag:?}, found {:?}", other.unwrap_or("")))),
        }
    }

    fn floats(&mut self, tag: &str, len: usize) -> Result<Vec<f64>> {
        let fields = self.record(tag)?;
        if fields.len() != len {
            return Err(self.err(format!("{tag} has {} values, expected {len}", fields.len())));
        }
        fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| self.err(format!("bad number {f:?}")))
            })
            .collect()
    }

    fn integer<T: std::str::FromStr>(&self, field: &str) -> Result<T> {
        field
            .parse()
            .map_err(|_| self.err(format!("bad integer {field:?}")))
    }
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = Lines {
        inner: input.lines(),
        line_no: 0,
    };
    let version = lines.record(MAGIC)?;
    if version.len() != 1 || lines.integer::<u32>(&version[0])? != FORMAT_VERSION {
        return Err(lines.err(format!("unsupported format version {version:?}")));
    }
    let seed = match lines.record("seed")?.as_slice() {
        [s] => lines.integer::<u64>(s)?,
        _ => return Err(lines.err("seed takes one value")),
    };
    let kind_fields = lines.record("kind")?;
    let (label, params) = kind_fields
        .split_first()
        .ok_or_else(|| lines.err("missing kind label"))?;
    let params = params
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| lines.err(format!("bad number {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let kind = PrefixKind::from_label(label, &params)?;
    let (n, d) = match lines.record("shape")?.as_slice() {
        [n, d] => (lines.integer::<usize>(n)?, lines.integer::<usize>(d)?),
        _ => return Err(lines.err("shape takes two values")),
    };
    if n == 0 || d == 0 {
        return Err(lines.err("shape must be positive"));
    }
    let x_true = Vector::new(lines.floats("x_true", d)?);
    let mut sets: Vec<Vec<Example>> = Vec::with_capacity(3);
    for role in ROLES {
        let fields = lines.record("role")?;
        let count = match fields.as_slice() {
            [r, c] if r == role => lines.integer::<usize>(c)?,
            _ => return Err(lines.err(format!("expected role {role} <count>"))),
        };
        let mut set = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend(lines.floats("A", d)?);
            }
            let b = lines.floats("b", n)?;
            set.push(Example::new(Matrix::new(n, d, data)?, Vector::new(b))?);
        }
        sets.push(set);
    }
    if let Some(extra) = lines.inner.next() {
        let extra = extra?;
        if !extra.trim().is_empty() {
            lines.line_no += 1;
            return Err(lines.err("trailing content"));
        }
    }
    let test = sets.pop().unwrap_or_default();
    let valid = sets.pop().unwrap_or_default();
    let prefix = sets.pop().unwrap_or_default();
    Ok(Dataset {
        seed,
        kind,
        task: TaskSpec {
            n,
            d,
            m: prefix.len(),
            x_true,
        },
        prefix,
        valid,
        test,
    })
}

/// Long-format CSV with header `role,example,field,row,col,value`, where
/// `field` is `A` or `b` (`col` is 0 for `b`).
pub fn export_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["role", "example", "field", "row", "col", "value"])
        .map_err(io)?;
    for (role, set) in ROLES.iter().zip(roles(ds)) {
        for (i, e) in set.iter().enumerate() {
            for r in 0..e.a.rows() {
                for (c, v) in e.a.row(r).iter().enumerate() {
                    w.write_record([
                        role,
                        &i.to_string()[..],
                        "A",
                        &r.to_string(),
                        &c.to_string(),
                        &fmt_f64(*v),
                    ])
                    .map_err(io)?;
                }
            }
            for (r, v) in e.b.iter().enumerate() {
                w.write_record([
                    role,
                    &i.to_string()[..],
                    "b",
                    &r.to_string(),
                    "0",
                    &fmt_f64(*v),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, Sizes};

    fn small(kind: PrefixKind) -> Dataset {
        let sizes = Sizes {
            n: 3,
            d: 2,
            m: 2,
            valid: 2,
            test: 1,
            seeds: 1,
        };
        generate_dataset(4, &sizes, kind).unwrap()
    }

    #[test]
    fn text_roundtrip_is_exact() {
        for kind in [
            PrefixKind::Random,
            PrefixKind::COMBINED,
            PrefixKind::Noisy { std: 0.3 },
        ] {
            let ds = small(kind);
            let text = dataset_to_string(&ds);
            let back = read_dataset(text.as_bytes()).unwrap();
            assert_eq!(back, ds);
            assert_eq!(dataset_to_string(&back), text);
        }
    }

    #[test]
    fn header_layout() {
        let text = dataset_to_string(&small(PrefixKind::COMBINED));
        let head: Vec<&str> = text.lines().take(4).collect();
        assert_eq!(
            head,
            [
                "ricl-dataset 1",
                "seed 4",
                "kind imbalanced-noisy 0.4 0.4",
                "shape 3 2"
            ]
        );
    }

    #[test]
    fn malformed_inputs_are_parse_errors() {
        let text = dataset_to_string(&small(PrefixKind::Random));
        let cases = [
            text.replacen("ricl-dataset 1", "ricl-dataset 2", 1),
            text.replacen("seed 4", "seed four", 1),
            text.replacen("role valid", "role train", 1),
            text.lines().take(8).collect::<Vec<_>>().join("\n"),
            format!("{text}b 1 2 3\n"),
        ];
        for c in cases {
            assert!(
                matches!(read_dataset(c.as_bytes()), Err(Error::Parse(_))),
                "{c}"
            );
        }
    }

    #[test]
    fn csv_has_one_row_per_entry() {
        let ds = small(PrefixKind::Random);
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // 5 examples, each with 3x2 inputs and 3 targets.
        assert_eq!(text.lines().count(), 1 + 5 * 9);
        assert!(text.starts_with("role,example,field,row,col,value\nprefix,0,A,0,0,"));
    }
}
