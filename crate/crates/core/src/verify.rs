//! Self-checks behind `derivprod verify`.
//!
//! * `oracles`: the renormalized engine against exact block and jet
//!   products, the trace cocycle, and the linear shift B -> B + alpha A.
//! * `examples`: closed forms of the scalar, signed pair, diagonal/rotation
//!   and pure rotation ensembles.
//! * `theorems`: asymptotic alignment, rank-one and estimator agreement
//!   statements on `positive_bernoulli`.
//!
//! Every check is a pure function of the seed. Timings are never reported.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::diagnostics::{
    alignment_curve, projection_error, rank_one_ratio, sign_alignment, wedge_ratio, zero_visits, ZeroPolicy,
};
use crate::engine::{
    block_oracle, dual_product_oracle, run_trajectory, run_trajectory_with_state, trace_cocycle_check, track_vectors,
};
use crate::ensemble::{builtin, EnsembleSpec};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_abs_xi_phi, estimate_xi_integral, estimate_xi_psi, gamma_eps_derivative, sample_direction_nu,
    sample_direction_nu_star, xi_orbit_average, OrbitConfig, DEFAULT_BURN_IN,
};
use crate::linalg::{relative_difference, Mat, Vector};
use crate::record::fmt_float;
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Examples,
    Theorems,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "examples" => Ok(Suite::Examples),
            "theorems" => Ok(Suite::Theorems),
            "all" => Ok(Suite::All),
            other => Err(Error::BadParams(format!("unknown suite `{other}` (oracles, examples, theorems, all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn below(suite: &'static str, name: &str, value: f64, threshold: f64, detail: String) -> Check {
        Check { suite, name: name.into(), passed: value.is_finite() && value <= threshold, value, threshold, detail }
    }

    fn failed(suite: &'static str, name: &str, err: &Error) -> Check {
        Check {
            suite,
            name: name.into(),
            passed: false,
            value: f64::NAN,
            threshold: f64::NAN,
            detail: format!("error: {err}"),
        }
    }
}

fn run(suite: &'static str, name: &str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::failed(suite, name, &e))
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.extend(oracle_checks(seed));
    }
    if matches!(suite, Suite::Examples | Suite::All) {
        out.extend(example_checks(seed));
    }
    if matches!(suite, Suite::Theorems | Suite::All) {
        out.extend(theorem_checks(seed));
    }
    out
}

pub fn table(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        writeln!(s, "{mark}  {}/{}  value={:e} threshold={:e}  {}", c.suite, c.name, c.value, c.threshold, c.detail)
            .unwrap();
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    writeln!(s, "{passed}/{} passed", checks.len()).unwrap();
    s
}

pub fn to_csv(checks: &[Check]) -> String {
    let mut s = String::from("suite,name,passed,value,threshold,detail\n");
    for c in checks {
        let detail = c.detail.replace('"', "'");
        writeln!(
            s,
            "{},{},{},{},{},\"{detail}\"",
            c.suite,
            c.name,
            c.passed,
            fmt_float(c.value),
            fmt_float(c.threshold)
        )
        .unwrap();
    }
    s
}

pub fn to_json(checks: &[Check], seed: u64) -> String {
    let all_passed = checks.iter().all(|c| c.passed);
    let mut s = serde_json::to_string_pretty(&serde_json::json!({
        "seed": seed,
        "all_passed": all_passed,
        "checks": checks,
    }))
    .expect("serializable");
    s.push('\n');
    s
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Gaussian perturbation of the identity; spectral radius stays near 1.
pub fn desk_ensemble(d: usize) -> Result<EnsembleSpec> {
    EnsembleSpec::custom_parametric(d, params(&[("alpha", 0.3), ("beta", 1.0)]))
}

pub fn random_unit(d: usize, rng: &mut RngStream) -> Vector {
    loop {
        let v = Vector::new((0..d).map(|_| rng.standard_normal()).collect()).expect("finite");
        if let Ok(u) = v.normalized() {
            return u;
        }
    }
}

pub fn replay_pairs(spec: &EnsembleSpec, n: usize, rng: &mut RngStream) -> Vec<(Mat, Mat)> {
    (0..n).map(|_| spec.sample_pair(rng)).collect()
}

/// Relative gap of the engine's (S, T) to an oracle (S, T); T is measured
/// against max(|T|, |S|) so a nearly vanishing T is not over-weighted.
pub fn pair_gap(engine: (&Mat, &Mat), oracle: (&Mat, &Mat)) -> f64 {
    let s_ref = oracle.0.frobenius_norm();
    let t_ref = oracle.1.frobenius_norm().max(s_ref);
    relative_difference(engine.0, oracle.0, s_ref).max(relative_difference(engine.1, oracle.1, t_ref))
}

fn oracle_checks(seed: u64) -> Vec<Check> {
    const S: &str = "oracles";
    let mut out = Vec::new();

    out.push(run(S, "engine_vs_block", || {
        let mut worst_block: f64 = 0.0;
        let mut worst_dual: f64 = 0.0;
        let mut worst_phi: f64 = 0.0;
        for k in 0..20u64 {
            for d in [2, 3] {
                let spec = desk_ensemble(d)?;
                let mut rng = RngStream::for_purpose(seed, Purpose::Verify, k * 10 + d as u64);
                let x = random_unit(d, &mut rng);
                let pairs = replay_pairs(&spec, 200, &mut rng.clone());
                let (_, state) = run_trajectory_with_state(&spec, 200, &mut rng, std::slice::from_ref(&x), 200)?;
                let (bs, bt) = block_oracle(&pairs)?;
                let (ds, dt) = dual_product_oracle(&pairs)?;
                worst_block = worst_block.max(pair_gap((&state.s(), &state.t()), (&bs, &bt)));
                worst_dual = worst_dual.max(pair_gap((&ds, &dt), (&bs, &bt)));
                let (sx, tx) = (bs.mul_vec(&x), bt.mul_vec(&x));
                let phi = tx.norm() / sx.norm();
                let psi = sx.dot(&tx) / sx.dot(&sx);
                let tv = &state.tracked[0];
                worst_phi =
                    worst_phi.max((tv.phi - phi).abs() / phi.max(1.0)).max((tv.psi - psi).abs() / psi.abs().max(1.0));
            }
        }
        let detail = format!(
            "20 streams x d in {{2,3}}, n = 200; dual vs block {worst_dual:e}; phi/psi vs definition {worst_phi:e}"
        );
        let passed = worst_dual <= 1e-12 && worst_phi <= 1e-9;
        let mut c = Check::below(S, "engine_vs_block", worst_block, 1e-10, detail);
        c.passed &= passed;
        Ok(c)
    }));

    out.push(run(S, "wedge_accumulation", || {
        let mut worst: f64 = 0.0;
        for k in 0..10u64 {
            for d in [2, 3] {
                let spec = desk_ensemble(d)?;
                let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 1000 + k * 10 + d as u64);
                let pairs = replay_pairs(&spec, 200, &mut rng.clone());
                let (_, state) = run_trajectory_with_state(&spec, 200, &mut rng, &[], 200)?;
                let mut w = Mat::identity(d * (d - 1) / 2);
                for (a, _) in &pairs {
                    w = &a.exterior_square()? * &w;
                }
                let exact = w.spectral_norm().ln();
                worst = worst.max((state.log_norm_wedge().expect("d >= 2") - exact).abs());
            }
        }
        Ok(Check::below(
            S,
            "wedge_accumulation",
            worst,
            1e-8,
            "log|wedge^2 S_n| vs unnormalised exterior product, n = 200".into(),
        ))
    }));

    out.push(run(S, "trace_cocycle", || {
        let mut worst: f64 = 0.0;
        for k in 0..20u64 {
            for d in [2, 3] {
                let spec = desk_ensemble(d)?;
                let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 2000 + k * 10 + d as u64);
                let (_, state) = run_trajectory_with_state(&spec, 500, &mut rng, &[], 500)?;
                let c = trace_cocycle_check(&state, state.trace_sum)?;
                worst = worst.max((c.lhs - c.rhs).abs() / c.rhs.abs().max(1.0));
            }
        }
        Ok(Check::below(S, "trace_cocycle", worst, 1e-8, "20 streams x d in {2,3}, n = 500".into()))
    }));

    out.push(run(S, "trace_cocycle_signed_pair", || {
        let spec = builtin("signed_pair", &BTreeMap::new())?;
        let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 3000);
        let (rec, state) = run_trajectory_with_state(&spec, 500, &mut rng, &[], 500)?;
        let walk: i64 = rec.atoms.iter().map(|&i| if i == 0 { 1 } else { -1 }).sum();
        let c = trace_cocycle_check(&state, state.trace_sum)?;
        let err = (c.rhs - 2.0 * walk as f64).abs().max((c.lhs - c.rhs).abs());
        Ok(Check::below(S, "trace_cocycle_signed_pair", err, 1e-8, format!("rhs = {} = 2 x step sum {walk}", c.rhs)))
    }));

    out.push(run(S, "linear_shift", || {
        let spec = builtin("positive_bernoulli", &BTreeMap::new())?;
        let n = 1000;
        let x = Vector::basis(2, 0);
        let mut worst: f64 = 0.0;
        for alpha in [0.5, -0.5] {
            let rng = RngStream::for_purpose(seed, Purpose::Verify, 4000);
            let base = track_vectors(&spec, n, &mut rng.clone(), std::slice::from_ref(&x))?;
            let shifted = track_vectors(&spec.shifted_b(alpha), n, &mut rng.clone(), std::slice::from_ref(&x))?;
            worst = worst.max((shifted[0].psi - base[0].psi - n as f64 * alpha).abs());
        }
        Ok(Check::below(
            S,
            "linear_shift",
            worst,
            1e-9,
            "psi_n(B + alpha A) - psi_n(B) - n alpha, alpha = +-0.5, n = 1000".into(),
        ))
    }));

    out
}

/// phi_n / n for A = diag(a, b), B = quarter turn, tracked e_1:
/// (1 / (n a)) sum_{j < n} (b / a)^j.
pub fn diag_rotation_phi_over_n(a: f64, b: f64, n: usize) -> f64 {
    let r = b / a;
    let mut sum = 0.0;
    let mut p = 1.0;
    for _ in 0..n {
        sum += p;
        p *= r;
    }
    sum / (n as f64 * a)
}

fn example_checks(seed: u64) -> Vec<Check> {
    const S: &str = "examples";
    let mut out = Vec::new();

    out.push(run(S, "scalar_iid", || {
        let spec = builtin("scalar_iid", &BTreeMap::new())?;
        let x = Vector::basis(1, 0);
        let psi = estimate_xi_psi(&spec, 100_000, 16, seed, &x)?;
        let phi = estimate_abs_xi_phi(&spec, 100_000, 16, seed, &x)?;
        let z = ((psi.value - 1.0) / psi.std_err).abs().max((phi.abs_value - 1.0) / phi.std_err);
        let mut c = Check::below(
            S,
            "scalar_iid",
            z,
            3.0,
            format!(
                "psi/n = {} (se {:e}), phi/n = {} (se {:e}); value is the worst |z| against 1",
                psi.value, psi.std_err, phi.abs_value, phi.std_err
            ),
        );
        c.passed &= psi.std_err < 5e-3 && phi.std_err < 5e-3;
        Ok(c)
    }));

    out.push(run(S, "signed_pair", || {
        let spec = builtin("signed_pair", &BTreeMap::new())?;
        let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 5000);
        let rec = run_trajectory(&spec, 10_000, &mut rng, &[Vector::basis(2, 0)], 1)?;
        let mut walk = 0i64;
        let mut worst: f64 = 0.0;
        let mut walk_zeros = Vec::new();
        for (row, &atom) in rec.rows.iter().zip(&rec.atoms) {
            walk += if atom == 0 { 1 } else { -1 };
            if walk == 0 {
                walk_zeros.push(row.n);
            }
            worst = worst.max((row.tracked[0].psi - walk as f64).abs());
        }
        let visits = zero_visits(&rec, ZeroPolicy::TrackedPhi(0));
        let xi = estimate_xi_integral(&spec, 20_000, DEFAULT_BURN_IN, seed)?;
        let mut c = Check::below(
            S,
            "signed_pair",
            worst,
            1e-9,
            format!(
                "psi_n vs replayed step sum over 1e4 steps; {} zero visits; integral route {} (se {:e})",
                visits.len(),
                xi.value,
                xi.std_err
            ),
        );
        c.passed &= visits == walk_zeros && !visits.is_empty() && xi.value.abs() <= 3.0 * xi.std_err;
        Ok(c)
    }));

    out.push(run(S, "diag_rotation", || {
        let spec = builtin("diag_rotation", &params(&[("alpha", 2.0), ("beta", 0.5)]))?;
        let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 6000);
        let rec1 = run_trajectory(&spec, 1000, &mut rng, &[Vector::basis(2, 0)], 1)?;
        let rec2 = run_trajectory(&spec, 25, &mut rng, &[Vector::basis(2, 1)], 1)?;
        let mut worst: f64 = 0.0;
        for r in &rec1.rows {
            let exact = diag_rotation_phi_over_n(2.0, 0.5, r.n);
            worst = worst.max((r.tracked[0].phi / r.n as f64 - exact).abs());
        }
        for r in &rec2.rows {
            let exact = diag_rotation_phi_over_n(0.5, 2.0, r.n);
            worst = worst.max((r.tracked[0].phi / r.n as f64 - exact).abs() / exact);
        }
        let e1_last = rec1.last().expect("rows").tracked[0].phi / 1000.0;
        let e2_last = rec2.last().expect("rows").tracked[0].phi / 25.0;
        let mut c = Check::below(
            S,
            "diag_rotation",
            worst,
            1e-8,
            format!("e1: phi_1000/1000 = {e1_last:e}; e2: phi_25/25 = {e2_last:e}"),
        );
        c.passed &= e1_last < 1e-2 && e2_last > 1e3;
        Ok(c)
    }));

    out.push(run(S, "pure_rotation", || {
        let theta = 1.0;
        let spec = builtin("pure_rotation", &params(&[("theta", theta)]))?;
        let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 7000);
        let x = random_unit(2, &mut rng);
        let rec = run_trajectory(&spec, 1000, &mut rng, &[x], 1)?;
        let mut worst: f64 = 0.0;
        for r in &rec.rows {
            let t = &r.tracked[0];
            let n = r.n as f64;
            worst = worst
                .max((t.phi / n - 1.0).abs())
                .max((t.psi / n - theta.cos()).abs())
                .max((t.delta_xy.unwrap_or(f64::NAN) - theta.sin()).abs());
        }
        Ok(Check::below(
            S,
            "pure_rotation",
            worst,
            1e-10,
            "phi/n = 1, psi/n = cos 1, delta = sin 1 for n <= 1000".into(),
        ))
    }));

    out
}

/// Combined standard error of a difference of independent estimates.
pub fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn theorem_checks(seed: u64) -> Vec<Check> {
    const S: &str = "theorems";
    let mut out = Vec::new();
    let spec = match builtin("positive_bernoulli", &BTreeMap::new()) {
        Ok(s) => s,
        Err(e) => return vec![Check::failed(S, "positive_bernoulli", &e)],
    };
    let x = Vector::basis(2, 0);

    let psi = estimate_xi_psi(&spec, 10_000, 64, seed, &x);

    out.push(run(S, "alignment_and_sign", || {
        let sign = psi.as_ref().map_err(Clone::clone)?.value.signum();
        let mut worst_delta: f64 = 0.0;
        let mut worst_gap: f64 = 0.0;
        for k in 0..10u64 {
            let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 8000 + k);
            let rec = run_trajectory(&spec, 10_000, &mut rng, std::slice::from_ref(&x), 1)?;
            worst_delta = worst_delta.max(alignment_curve(&rec, 0)?.tail_max().unwrap_or(f64::INFINITY));
            worst_gap = worst_gap.max(sign_alignment(&rec, 0, sign)?.tail_max().unwrap_or(f64::INFINITY));
        }
        let mut c = Check::below(
            S,
            "alignment_and_sign",
            worst_delta,
            1e-3,
            format!("10 streams, n = 1e4, tail max delta; signed gap {worst_gap:e}"),
        );
        c.passed &= worst_gap < 1e-3;
        Ok(c)
    }));

    out.push(run(S, "rank_one_and_wedge", || {
        let mut worst_rank: f64 = 0.0;
        let mut worst_wedge: f64 = 0.0;
        for k in 0..10u64 {
            let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 9000 + k);
            let xs = [random_unit(2, &mut rng), random_unit(2, &mut rng)];
            let (rec, state) = run_trajectory_with_state(&spec, 500, &mut rng, &xs, 500)?;
            worst_rank = worst_rank.max(rank_one_ratio(&state)?);
            worst_wedge = worst_wedge.max(wedge_ratio(&rec, 0, 1)?.samples.last().expect("row").1);
        }
        let mut c =
            Check::below(S, "rank_one_and_wedge", worst_rank, 1e-6, format!("n = 500; wedge ratio {worst_wedge:e}"));
        c.passed &= worst_wedge < 1e-6;
        Ok(c)
    }));

    out.push(run(S, "uniform_projection", || {
        let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 10_000);
        let xs: Vec<Vector> = (0..20).map(|_| random_unit(2, &mut rng)).collect();
        let (_, state) = run_trajectory_with_state(&spec, 500, &mut rng, &xs, 500)?;
        let err = projection_error(&state, &Vector::ones_normalized(2))?;
        Ok(Check::below(
            S,
            "uniform_projection",
            err,
            1e-3,
            "| |S_n x|/|S_n| - |<x, z~>| | over 20 unit x, n = 500".into(),
        ))
    }));

    out.push(run(S, "directions_not_orthogonal", || {
        let mut smallest = f64::INFINITY;
        for k in 0..1000u64 {
            let z = sample_direction_nu(
                &spec,
                DEFAULT_BURN_IN,
                &mut RngStream::for_purpose(seed, Purpose::DirectionNu, 1_000_000 + k),
            )?;
            let zt = sample_direction_nu_star(
                &spec,
                DEFAULT_BURN_IN,
                &mut RngStream::for_purpose(seed, Purpose::DirectionNuStar, 1_000_000 + k),
            )?;
            smallest = smallest.min(z.unit.dot(&zt.unit).abs());
        }
        Ok(Check {
            suite: S,
            name: "directions_not_orthogonal".into(),
            passed: smallest > 1e-3,
            value: smallest,
            threshold: 1e-3,
            detail: "min |<z~, z>| over 1000 independent draws must exceed the threshold".into(),
        })
    }));

    out.push(run(S, "estimator_agreement", || {
        let psi = psi.as_ref().map_err(Clone::clone)?;
        let phi = estimate_abs_xi_phi(&spec, 10_000, 64, seed, &x)?;
        let integral = estimate_xi_integral(&spec, 20_000, DEFAULT_BURN_IN, seed)?;
        let orbit = xi_orbit_average(&spec, &OrbitConfig::new(10_000, DEFAULT_BURN_IN, 64, seed))?;
        let z = |a: f64, sa: f64, b: f64, sb: f64| (a - b).abs() / combined(sa, sb);
        let zs = [
            z(psi.value, psi.std_err, integral.value, integral.std_err),
            z(psi.value, psi.std_err, orbit.value, orbit.std_err),
            z(integral.value, integral.std_err, orbit.value, orbit.std_err),
            z(phi.abs_value, phi.std_err, psi.abs_value, psi.std_err),
        ];
        let worst = zs.iter().cloned().fold(0.0, f64::max);
        Ok(Check::below(
            S,
            "estimator_agreement",
            worst,
            3.0,
            format!(
                "psi {} phi {} integral {} orbit {}; value is the worst pairwise |z|",
                psi.value, phi.abs_value, integral.value, orbit.value
            ),
        ))
    }));

    out.push(run(S, "phi_along_z", || {
        let psi = psi.as_ref().map_err(Clone::clone)?;
        let values: Vec<f64> = (0..16u64)
            .map(|k| {
                let mut start = RngStream::for_purpose(seed, Purpose::OrbitStart, 2_000_000 + k);
                let z = sample_direction_nu(&spec, DEFAULT_BURN_IN, &mut start)?.unit;
                let mut rng = RngStream::for_purpose(seed, Purpose::Verify, 11_000 + k);
                let tv = track_vectors(&spec, 10_000, &mut rng, &[z])?;
                Ok(tv[0].phi / 10_000.0)
            })
            .collect::<Result<_>>()?;
        let stats = crate::stats::RunningStats::from_slice(&values);
        let zscore = (stats.mean() - psi.abs_value).abs() / combined(stats.std_err(), psi.std_err);
        Ok(Check::below(
            S,
            "phi_along_z",
            zscore,
            3.0,
            format!("phi_n(Z)/n = {} vs |psi route| {}", stats.mean(), psi.abs_value),
        ))
    }));

    out.push(run(S, "gamma_eps", || {
        let psi = psi.as_ref().map_err(Clone::clone)?;
        let r = &gamma_eps_derivative(&spec, &[1e-3], 10_000, 64, seed)?[0];
        let gap = (r.ratio - psi.value).abs();
        let allowed = (3.0 * combined(r.std_err, psi.std_err)).max(5e-3);
        let mut c = Check::below(
            S,
            "gamma_eps",
            gap,
            allowed,
            format!("ratio {} vs psi route {} at eps = 1e-3", r.ratio, psi.value),
        );
        c.threshold = allowed;
        Ok(c)
    }));

    out
}
