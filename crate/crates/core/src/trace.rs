//! Per-step training records and the convergence monitor.

use std::io::Write;

use crate::error::{Error, Result};

/// Shortest decimal that parses back to the same `f64`, switching to
/// exponent notation for very small or very large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Outer objective at the iterate of this step.
    pub l_valid: f64,
    pub grad_norm_sq: f64,
    /// Step length used to leave this iterate (0 on the final row).
    pub step_size: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.l_valid).collect()
    }

    /// Whether `l_valid` never rises by more than `slack` between rows.
    pub fn is_monotone_within(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].l_valid <= w[0].l_valid + slack)
    }

    /// CSV with header `step,l_valid,grad_norm_sq,step_size`, floats as in
    /// [`fmt_f64`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["step", "l_valid", "grad_norm_sq", "step_size"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                fmt_f64(r.l_valid),
                fmt_f64(r.grad_norm_sq),
                fmt_f64(r.step_size),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStats {
    /// `(T, min_{t <= T} grad_norm_sq)` per requested horizon.
    pub min_grad_sq: Vec<(usize, f64)>,
    /// `max_T min_grad_sq(T) * sqrt(T)`
    pub c_fit: f64,
}

/// Running minimum of the squared gradient norm at each horizon.
pub fn convergence_stats(trace: &TrainTrace, horizons: &[usize]) -> Result<ConvergenceStats> {
    let mut min_grad_sq = Vec::with_capacity(horizons.len());
    for &t in horizons {
        if t >= trace.len() {
            return Err(Error::InvalidConfig(format!(
                "horizon {t} exceeds the trace (last step {})",
                trace.len().saturating_sub(1)
            )));
        }
        let m = trace.rows[..=t]
            .iter()
            .map(|r| r.grad_norm_sq)
            .fold(f64::INFINITY, f64::min);
        min_grad_sq.push((t, m));
    }
    let c_fit = min_grad_sq
        .iter()
        .map(|(t, m)| m * (*t as f64).sqrt())
        .fold(0.0, f64::max);
    Ok(ConvergenceStats { min_grad_sq, c_fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(grads: &[f64]) -> TrainTrace {
        TrainTrace {
            rows: grads
                .iter()
                .enumerate()
                .map(|(step, g)| TraceRow {
                    step,
                    l_valid: 1.0,
                    grad_norm_sq: *g,
                    step_size: 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_trace() {
        let s = convergence_stats(&trace(&[2.0; 10]), &[1, 4, 9]).unwrap();
        assert!(s.min_grad_sq.iter().all(|(_, m)| *m == 2.0));
        assert_eq!(s.c_fit, 2.0 * 3.0);
    }

    #[test]
    fn zero_step_pins_minimum() {
        let s = convergence_stats(&trace(&[3.0, 1.0, 0.0, 5.0]), &[1, 2, 3]).unwrap();
        assert_eq!(s.min_grad_sq, vec![(1, 1.0), (2, 0.0), (3, 0.0)]);
    }

    #[test]
    fn horizon_past_end() {
        assert!(convergence_stats(&trace(&[1.0; 3]), &[3]).is_err());
    }

    #[test]
    fn csv_layout() {
        let t = trace(&[0.25, 1e-20]);
        assert_eq!(
            t.to_csv_string(),
            "step,l_valid,grad_norm_sq,step_size\n0,1.0,0.25,0.1\n1,1.0,1e-20,0.1\n"
        );
    }
}
