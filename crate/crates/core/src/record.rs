//! Recorded trajectories and their CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedRow {
    pub log_norm_sx: f64,
    pub phi: f64,
    pub psi: f64,
    pub delta_xy: Option<f64>,
    pub sign_gap_plus: Option<f64>,
    pub sign_gap_minus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub n: usize,
    pub log_norm_s: f64,
    pub log_norm_wedge: Option<f64>,
    pub tracked: Vec<TrackedRow>,
    pub trace_cocycle: f64,
    pub trace_sum: f64,
    /// |T_n| below the engine's zero threshold
    pub t_zero: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub n_tracked: usize,
    pub rows: Vec<Row>,
    /// Atom index drawn at every step (finite ensembles only).
    pub atoms: Vec<usize>,
}

/// 17 significant digits, enough to round-trip an f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_opt(out: &mut String, x: Option<f64>) {
    if let Some(x) = x {
        out.push_str(&fmt_float(x));
    }
}

impl TrajectoryRecord {
    pub fn new(n_tracked: usize) -> Self {
        TrajectoryRecord { n_tracked, rows: Vec::new(), atoms: Vec::new() }
    }

    pub fn last(&self) -> Option<&Row> {
        self.rows.last()
    }

    pub fn check_tracked(&self, index: usize) -> Result<()> {
        if index < self.n_tracked {
            Ok(())
        } else {
            Err(Error::NoTrackedVector(index))
        }
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["n".to_string(), "log_norm_S".into(), "log_norm_wedge".into()];
        for k in 0..self.n_tracked {
            for name in ["log_norm_sx", "phi", "psi", "delta_xy", "sign_gap_plus", "sign_gap_minus"] {
                cols.push(format!("{name}_{k}"));
            }
        }
        cols.extend(["trace_cocycle".into(), "trace_sum".into(), "t_zero".into()]);
        cols.join(",")
    }

    /// Absent values are written as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},", r.n, fmt_float(r.log_norm_s)).unwrap();
            push_opt(&mut out, r.log_norm_wedge);
            for t in &r.tracked {
                write!(out, ",{},{},{},", fmt_float(t.log_norm_sx), fmt_float(t.phi), fmt_float(t.psi)).unwrap();
                push_opt(&mut out, t.delta_xy);
                out.push(',');
                push_opt(&mut out, t.sign_gap_plus);
                out.push(',');
                push_opt(&mut out, t.sign_gap_minus);
            }
            writeln!(out, ",{},{},{}", fmt_float(r.trace_cocycle), fmt_float(r.trace_sum), u8::from(r.t_zero)).unwrap();
        }
        out
    }
}
