//! Threshold verdicts on recorded trajectories.
//!
//! The limit statements are asymptotic, so verdicts read only the last 10%
//! of the samples.

use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::{zero_threshold, ProductState};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::record::{fmt_float, TrajectoryRecord};

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_DIVERGE: f64 = 0.1;
pub const TAIL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ConvergedTo { target: f64, tol: f64 },
    Diverged { threshold: f64 },
    Inconclusive,
}

impl Verdict {
    pub fn is_converged(&self) -> bool {
        matches!(self, Verdict::ConvergedTo { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerdictRule {
    pub target: f64,
    /// converged when every tail sample is within `tol` of the target
    pub tol: f64,
    /// diverged when every tail sample is further than this from the target
    pub diverge: f64,
}

impl Default for VerdictRule {
    fn default() -> Self {
        VerdictRule { target: 0.0, tol: DEFAULT_TOL, diverge: DEFAULT_DIVERGE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticSeries {
    pub name: String,
    pub samples: Vec<(usize, f64)>,
    pub verdict: Verdict,
    pub detail: String,
}

/// Last 10% of the samples, at least one.
pub fn tail(samples: &[(usize, f64)]) -> &[(usize, f64)] {
    let k = ((samples.len() as f64 * TAIL_FRACTION).ceil() as usize).max(1).min(samples.len());
    &samples[samples.len() - k..]
}

impl DiagnosticSeries {
    pub fn new(name: impl Into<String>, samples: Vec<(usize, f64)>, rule: VerdictRule) -> Self {
        let mut s =
            DiagnosticSeries { name: name.into(), samples, verdict: Verdict::Inconclusive, detail: String::new() };
        s.judge(rule);
        s
    }

    /// Recompute the verdict (and detail) under another rule.
    pub fn judge(&mut self, rule: VerdictRule) {
        let t = tail(&self.samples);
        if t.is_empty() {
            self.verdict = Verdict::Inconclusive;
            self.detail = "no samples".into();
            return;
        }
        let dev: Vec<f64> = t.iter().map(|(_, v)| (v - rule.target).abs()).collect();
        let max = dev.iter().cloned().fold(0.0, f64::max);
        let min = dev.iter().cloned().fold(f64::INFINITY, f64::min);
        self.verdict = if max < rule.tol {
            Verdict::ConvergedTo { target: rule.target, tol: rule.tol }
        } else if min > rule.diverge {
            Verdict::Diverged { threshold: rule.diverge }
        } else {
            Verdict::Inconclusive
        };
        self.detail =
            format!("tail of {} samples from n = {}: |value - {}| in [{min:e}, {max:e}]", t.len(), t[0].0, rule.target);
    }

    pub fn tail_max(&self) -> Option<f64> {
        let t = tail(&self.samples);
        (!t.is_empty()).then(|| t.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,value\n");
        for (n, v) in &self.samples {
            writeln!(out, "{n},{}", fmt_float(*v)).unwrap();
        }
        out
    }
}

/// delta(x_n, y_n) for one tracked vector; rows with phi = 0 are skipped.
pub fn alignment_curve(record: &TrajectoryRecord, tracked_index: usize) -> Result<DiagnosticSeries> {
    record.check_tracked(tracked_index)?;
    let samples = record.rows.iter().filter_map(|r| r.tracked[tracked_index].delta_xy.map(|d| (r.n, d))).collect();
    Ok(DiagnosticSeries::new(format!("alignment_{tracked_index}"), samples, VerdictRule::default()))
}

/// |x_n - y_n| when `xi_sign` is positive, |x_n + y_n| otherwise.
pub fn sign_alignment(record: &TrajectoryRecord, tracked_index: usize, xi_sign: f64) -> Result<DiagnosticSeries> {
    record.check_tracked(tracked_index)?;
    if xi_sign == 0.0 || !xi_sign.is_finite() {
        return Err(Error::BadParams("xi_sign must be +1 or -1".into()));
    }
    let plus = xi_sign > 0.0;
    let samples = record
        .rows
        .iter()
        .filter_map(|r| {
            let t = &r.tracked[tracked_index];
            let gap = if plus { t.sign_gap_plus } else { t.sign_gap_minus };
            gap.map(|g| (r.n, g))
        })
        .collect();
    let name = format!("sign_gap_{}_{tracked_index}", if plus { "plus" } else { "minus" });
    Ok(DiagnosticSeries::new(name, samples, VerdictRule::default()))
}

/// sigma_2 / sigma_1 of the derived product (scale and transpose invariant).
pub fn rank_one_ratio(state: &ProductState) -> Result<f64> {
    let d = state.dim();
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    if state.u.frobenius_norm() < zero_threshold(state.n) {
        return Err(Error::ZeroT);
    }
    let sv = state.u.singular_values();
    Ok(sv[1] / sv[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroPolicy {
    /// |T_n| below the engine threshold
    MatrixFlag,
    /// phi_n of the given tracked vector is zero
    TrackedPhi(usize),
}

/// Recorded steps at which T_n counts as zero.
pub fn zero_visits(record: &TrajectoryRecord, policy: ZeroPolicy) -> Vec<usize> {
    record
        .rows
        .iter()
        .filter(|r| match policy {
            ZeroPolicy::MatrixFlag => r.t_zero,
            ZeroPolicy::TrackedPhi(i) => r.tracked.get(i).is_some_and(|t| t.phi == 0.0),
        })
        .map(|r| r.n)
        .collect()
}

/// Mean gap between zero visits among those up to n, for growing n. Random
/// walk returns have infinite mean, so this keeps growing; the verdict is
/// always inconclusive because this is a smoke check only.
pub fn recurrence_gaps(visits: &[usize]) -> DiagnosticSeries {
    let mut samples = Vec::new();
    let mut prev = 0usize;
    let mut sum = 0usize;
    for (k, &v) in visits.iter().enumerate() {
        sum += v - prev;
        prev = v;
        samples.push((v, sum as f64 / (k + 1) as f64));
    }
    let mut s = DiagnosticSeries::new("recurrence_mean_gap", samples, VerdictRule::default());
    s.verdict = Verdict::Inconclusive;
    s.detail = format!("{} visits; mean gap is expected to grow without bound", visits.len());
    s
}

/// |wedge^2 S_n| / (|S_n x| |S_n y|) for two tracked vectors.
pub fn wedge_ratio(record: &TrajectoryRecord, i: usize, j: usize) -> Result<DiagnosticSeries> {
    record.check_tracked(i)?;
    record.check_tracked(j)?;
    let mut samples = Vec::with_capacity(record.rows.len());
    for r in &record.rows {
        let lw = r.log_norm_wedge.ok_or(Error::DimensionTooSmall(1))?;
        samples.push((r.n, (lw - r.tracked[i].log_norm_sx - r.tracked[j].log_norm_sx).exp()));
    }
    Ok(DiagnosticSeries::new(format!("wedge_ratio_{i}_{j}"), samples, VerdictRule { tol: 1e-6, ..Default::default() }))
}

/// Largest gap between |S_n x| / |S_n| and |<x, z~>| over the tracked
/// vectors of `state`, where z~ is the direction of S_n^T y0.
pub fn projection_error(state: &ProductState, y0: &Vector) -> Result<f64> {
    let zt = state.s_hat.tr_mul_vec(y0).normalized()?;
    let mut worst: f64 = 0.0;
    for tv in &state.tracked {
        let ratio = (tv.log_norm_sx - state.log_norm_s).exp();
        worst = worst.max((ratio - tv.x0.dot(&zt).abs()).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_state, run_trajectory, run_trajectory_with_state};
    use crate::ensemble::{builtin, parse_ensemble};
    use crate::linalg::Mat;
    use crate::rng::RngStream;
    use std::collections::BTreeMap;

    fn none() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn scaled_b(alpha: f64) -> crate::ensemble::EnsembleSpec {
        builtin("positive_bernoulli", &none()).unwrap().map_atoms(|a| (a.a.clone(), a.a.scale(alpha))).unwrap()
    }

    #[test]
    fn scaled_perturbation_is_aligned() {
        let rec = run_trajectory(&scaled_b(0.5), 200, &mut RngStream::new(1, 1), &[Vector::basis(2, 0)], 1).unwrap();
        let a = alignment_curve(&rec, 0).unwrap();
        assert_eq!(a.samples.len(), 200);
        assert!(a.samples.iter().all(|(_, v)| *v < 1e-7));
        assert!(a.verdict.is_converged());
        let s = sign_alignment(&rec, 0, 1.0).unwrap();
        assert!(s.samples.iter().all(|(_, v)| *v < 1e-7));
        assert!(zero_visits(&rec, ZeroPolicy::MatrixFlag).is_empty());

        let rec = run_trajectory(&scaled_b(-0.5), 200, &mut RngStream::new(1, 1), &[Vector::basis(2, 0)], 1).unwrap();
        let s = sign_alignment(&rec, 0, -1.0).unwrap();
        assert!(s.samples.iter().all(|(_, v)| *v < 1e-7));
    }

    #[test]
    fn pure_rotation_does_not_align() {
        let spec = builtin("pure_rotation", &none()).unwrap();
        let rec = run_trajectory(&spec, 300, &mut RngStream::new(1, 1), &[Vector::basis(2, 0)], 1).unwrap();
        let a = alignment_curve(&rec, 0).unwrap();
        for (_, v) in &a.samples {
            assert!((v - 1f64.sin()).abs() < 1e-10);
        }
        assert_eq!(a.verdict, Verdict::Diverged { threshold: DEFAULT_DIVERGE });
    }

    #[test]
    fn missing_tracked_vector() {
        let spec = builtin("pure_rotation", &none()).unwrap();
        let rec = run_trajectory(&spec, 3, &mut RngStream::new(1, 1), &[], 1).unwrap();
        assert_eq!(alignment_curve(&rec, 0).unwrap_err(), Error::NoTrackedVector(0));
        assert_eq!(sign_alignment(&rec, 2, 1.0).unwrap_err(), Error::NoTrackedVector(2));
    }

    #[test]
    fn rank_one_closed_form() {
        let a = Mat::diag(&[2.0, 0.5]);
        let mut s = init_state(2, &[]).unwrap();
        assert_eq!(rank_one_ratio(&s).unwrap_err(), Error::ZeroT);
        for n in 1..=12 {
            s.step(&a, &a.scale(0.3)).unwrap();
            let r = rank_one_ratio(&s).unwrap();
            let expected = 0.25f64.powi(n);
            assert!((r - expected).abs() <= 1e-12 * expected, "n={n}: {r} vs {expected}");
        }
    }

    #[test]
    fn rank_one_rotation_is_one() {
        let spec = builtin("pure_rotation", &none()).unwrap();
        let (_, s) = run_trajectory_with_state(&spec, 50, &mut RngStream::new(1, 1), &[], 1).unwrap();
        assert!((rank_one_ratio(&s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_perturbation_visits_every_step() {
        let spec =
            parse_ensemble("[[atoms]]\nprob = 1.0\nA = [[2.0, 1.0], [1.0, 1.0]]\nB = [[0.0, 0.0], [0.0, 0.0]]\n")
                .unwrap();
        let rec = run_trajectory(&spec, 25, &mut RngStream::new(1, 1), &[Vector::basis(2, 0)], 1).unwrap();
        let all: Vec<usize> = (1..=25).collect();
        assert_eq!(zero_visits(&rec, ZeroPolicy::MatrixFlag), all);
        assert_eq!(zero_visits(&rec, ZeroPolicy::TrackedPhi(0)), all);
        assert_eq!(alignment_curve(&rec, 0).unwrap().verdict, Verdict::Inconclusive);
    }

    #[test]
    fn tail_is_last_tenth() {
        let samples: Vec<(usize, f64)> = (1..=25).map(|n| (n, n as f64)).collect();
        assert_eq!(tail(&samples).len(), 3);
        assert_eq!(tail(&samples[..1]).len(), 1);
        assert!(tail(&[]).is_empty());
    }

    #[test]
    fn recurrence_smoke_is_inconclusive() {
        let s = recurrence_gaps(&[2, 4, 10, 30]);
        assert_eq!(s.samples, vec![(2, 2.0), (4, 2.0), (10, 10.0 / 3.0), (30, 7.5)]);
        assert_eq!(s.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn diagnostic_csv() {
        let s = DiagnosticSeries::new("x", vec![(1, 0.5), (2, 0.25)], VerdictRule::default());
        assert_eq!(s.to_csv(), "n,value\n1,5.0000000000000000e-1\n2,2.5000000000000000e-1\n");
    }
}
