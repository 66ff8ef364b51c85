//! Monte Carlo estimators: Lyapunov exponents, the random directions Z and
//! Z~, and four routes to E[xi].
//!
//! Every replica or sample owns an RNG stream derived from the seed and a
//! purpose tag, so the routes are statistically independent of each other.
//! Replicas run in parallel but are reduced in index order, which keeps the
//! output byte-stable.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::track_vectors;
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::linalg::{delta, Mat, Vector, SINGULARITY_RATIO};
use crate::rng::{Purpose, RngStream};
use crate::stats::RunningStats;

pub const DEFAULT_BURN_IN: usize = 200;
pub const DEFAULT_STEPS: usize = 10_000;

/// Successive direction estimates further apart than this (in delta) mark
/// the direction as unsettled.
pub const SETTLE_DELTA: f64 = 0.1;

/// |<z~, A z>| below this fraction of |A|_2 rejects the sample.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Abort when more than this fraction of samples is rejected.
pub const MAX_REJECT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMethod {
    PsiRoute,
    PhiRoute,
    IntegralRoute,
    OrbitRoute,
}

impl XiMethod {
    pub fn name(self) -> &'static str {
        match self {
            XiMethod::PsiRoute => "psi_route",
            XiMethod::PhiRoute => "phi_route",
            XiMethod::IntegralRoute => "integral_route",
            XiMethod::OrbitRoute => "orbit_route",
        }
    }
}

/// A unit vector standing for a point of projective space. The sign is
/// cosmetic: the largest-magnitude entry is made positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub unit: Vector,
    pub burn_in: usize,
    /// False when the last two estimates were more than [`SETTLE_DELTA`]
    /// apart, a symptom of a non-contracting ensemble.
    pub settled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovEstimate {
    pub gamma: f64,
    /// Absent for d = 1.
    pub gamma2: Option<f64>,
    pub n_steps: usize,
    pub n_replicas: usize,
    pub std_err_gamma: f64,
    pub std_err_gamma2: Option<f64>,
    pub replicas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiEstimate {
    pub value: f64,
    pub abs_value: f64,
    pub method: XiMethod,
    pub replicas: Vec<f64>,
    pub std_err: f64,
    pub rejected_samples: usize,
}

impl XiEstimate {
    fn from_values(method: XiMethod, values: Vec<f64>, rejected_samples: usize) -> Self {
        let stats = RunningStats::from_slice(&values);
        let value = stats.mean();
        XiEstimate {
            value,
            abs_value: value.abs(),
            method,
            replicas: values,
            std_err: stats.std_err(),
            rejected_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsRatio {
    pub eps: f64,
    /// (gamma(eps) - gamma(0)) / eps
    pub ratio: f64,
    pub std_err: f64,
    pub replicas: Vec<f64>,
}

/// Run `f` for every replica index in parallel; results come back in index
/// order and the first failure (by index) wins.
fn par_replicas<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..count).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::BadParams(msg.into()))
    }
}

/// log |S_n|_2 and log |wedge^2 S_n|_2 along one sampled trajectory.
fn log_norms(spec: &EnsembleSpec, steps: usize, rng: &mut RngStream) -> Result<(f64, Option<f64>)> {
    let d = spec.dim();
    let mut s = Mat::identity(d);
    let mut log_s = 0.0;
    let mut wedge = (d >= 2).then(|| Mat::identity(d * (d - 1) / 2));
    let mut log_w = 0.0;
    for k in 1..=steps {
        let draw = spec.draw(rng);
        s = &*draw.a * &s;
        let c = s.max_abs();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Overflow.at_step(k));
        }
        s = s.scale(1.0 / c);
        log_s += c.ln();
        if let Some(w) = &wedge {
            let w_raw = &draw.a.exterior_square()? * w;
            let c = w_raw.max_abs();
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Overflow.at_step(k));
            }
            log_w += c.ln();
            wedge = Some(w_raw.scale(1.0 / c));
        }
    }
    let lw = wedge.map(|w| log_w + w.spectral_norm().ln());
    Ok((log_s + s.spectral_norm().ln(), lw))
}

/// Top exponent from log|S_n|/n and second exponent from
/// log|wedge^2 S_n|/n - gamma, averaged over replicas.
pub fn estimate_lyapunov(spec: &EnsembleSpec, steps: usize, replicas: usize, seed: u64) -> Result<LyapunovEstimate> {
    require(steps >= 100, "lyapunov estimation needs steps >= 100")?;
    require(replicas >= 1, "replicas must be at least 1")?;
    let runs = par_replicas(replicas, |r| {
        let mut rng = RngStream::for_purpose(seed, Purpose::Lyapunov, r as u64);
        log_norms(spec, steps, &mut rng)
    })?;
    let n = steps as f64;
    let gammas: Vec<f64> = runs.iter().map(|(ls, _)| ls / n).collect();
    let g = RunningStats::from_slice(&gammas);
    let (gamma2, std_err_gamma2) = if spec.dim() >= 2 {
        let g2: Vec<f64> = runs.iter().map(|(ls, lw)| (lw.expect("d >= 2") - ls) / n).collect();
        let s2 = RunningStats::from_slice(&g2);
        (Some(s2.mean()), Some(s2.std_err()))
    } else {
        (None, None)
    };
    Ok(LyapunovEstimate {
        gamma: g.mean(),
        gamma2,
        n_steps: steps,
        n_replicas: replicas,
        std_err_gamma: g.std_err(),
        std_err_gamma2,
        replicas: gammas,
    })
}

/// Accumulate P = M_1 M_2 ... M_k (new factors on the right) with
/// M_i = A_i or A_i^T, and return the direction of P x0. The right-append
/// order converges pathwise, and for an i.i.d. sequence it has the same law
/// as the forward product M_k ... M_1 x0.
fn accumulate_direction(
    spec: &EnsembleSpec,
    burn_in: usize,
    rng: &mut RngStream,
    start: &Vector,
    transpose: bool,
) -> Result<Direction> {
    require(burn_in >= 1, "burn_in must be at least 1")?;
    if start.dim() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), got: start.dim() });
    }
    let mut p = Mat::identity(spec.dim());
    let mut previous: Option<Vector> = None;
    for k in 1..=burn_in {
        let draw = spec.draw(rng);
        p = if transpose { &p * &draw.a.transpose() } else { &p * &*draw.a };
        let c = p.max_abs();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Overflow.at_step(k));
        }
        p = p.scale(1.0 / c);
        if k + 1 == burn_in {
            previous = Some(p.mul_vec(start));
        }
    }
    let unit = p.mul_vec(start).normalized()?;
    let settled = match previous {
        Some(prev) => delta(&prev, &unit)? <= SETTLE_DELTA,
        None => true,
    };
    Ok(Direction { unit: unit.canonical_sign(), burn_in, settled })
}

/// One draw from the stationary law nu on projective space.
pub fn sample_direction_nu(spec: &EnsembleSpec, burn_in: usize, rng: &mut RngStream) -> Result<Direction> {
    accumulate_direction(spec, burn_in, rng, &Vector::ones_normalized(spec.dim()), false)
}

/// One draw from the stationary law nu* of the transposed ensemble,
/// A_1^T A_2^T ... A_k^T y0.
pub fn sample_direction_nu_star(spec: &EnsembleSpec, burn_in: usize, rng: &mut RngStream) -> Result<Direction> {
    accumulate_direction(spec, burn_in, rng, &Vector::ones_normalized(spec.dim()), true)
}

fn check_rejections(rejected: usize, total: usize) -> Result<()> {
    if rejected as f64 > MAX_REJECT_FRACTION * total as f64 {
        Err(Error::HypothesisSuspect { rejected, total })
    } else {
        Ok(())
    }
}

/// Integral route: average of <z~, B z> / <z~, A z> with z ~ nu, z~ ~ nu* and
/// (A, B) ~ mu drawn independently for every sample.
pub fn estimate_xi_integral(spec: &EnsembleSpec, n_samples: usize, burn_in: usize, seed: u64) -> Result<XiEstimate> {
    require(n_samples >= 1, "samples must be at least 1")?;
    let samples = par_replicas(n_samples, |i| {
        let i = i as u64;
        let z = sample_direction_nu(spec, burn_in, &mut RngStream::for_purpose(seed, Purpose::DirectionNu, i))?;
        let zt =
            sample_direction_nu_star(spec, burn_in, &mut RngStream::for_purpose(seed, Purpose::DirectionNuStar, i))?;
        let (a, b) = spec.sample_pair(&mut RngStream::for_purpose(seed, Purpose::IntegralPair, i));
        let den = zt.unit.dot(&a.mul_vec(&z.unit));
        if den.abs() < DENOMINATOR_FLOOR * a.spectral_norm() {
            return Ok(None);
        }
        Ok(Some(zt.unit.dot(&b.mul_vec(&z.unit)) / den))
    })?;
    let rejected = samples.iter().filter(|s| s.is_none()).count();
    check_rejections(rejected, n_samples)?;
    Ok(XiEstimate::from_values(XiMethod::IntegralRoute, samples.into_iter().flatten().collect(), rejected))
}

fn tracked_route(
    spec: &EnsembleSpec,
    steps: usize,
    replicas: usize,
    seed: u64,
    x0: &Vector,
    purpose: Purpose,
    read: impl Fn(f64, f64) -> f64 + Sync + Send,
) -> Result<Vec<f64>> {
    require(steps >= 1, "steps must be at least 1")?;
    require(replicas >= 1, "replicas must be at least 1")?;
    par_replicas(replicas, |r| {
        let mut rng = RngStream::for_purpose(seed, purpose, r as u64);
        let tv = track_vectors(spec, steps, &mut rng, std::slice::from_ref(x0))?;
        Ok(read(tv[0].phi, tv[0].psi) / steps as f64)
    })
}

/// Psi route: psi_n(x0) / n per replica.
pub fn estimate_xi_psi(
    spec: &EnsembleSpec,
    steps: usize,
    replicas: usize,
    seed: u64,
    x0: &Vector,
) -> Result<XiEstimate> {
    let values = tracked_route(spec, steps, replicas, seed, x0, Purpose::PsiRoute, |_, psi| psi)?;
    Ok(XiEstimate::from_values(XiMethod::PsiRoute, values, 0))
}

/// Phi route: phi_n(x0) / n per replica. Only the absolute value is
/// meaningful; `value` carries the same number.
pub fn estimate_abs_xi_phi(
    spec: &EnsembleSpec,
    steps: usize,
    replicas: usize,
    seed: u64,
    x0: &Vector,
) -> Result<XiEstimate> {
    let values = tracked_route(spec, steps, replicas, seed, x0, Purpose::PhiRoute, |phi, _| phi)?;
    Ok(XiEstimate::from_values(XiMethod::PhiRoute, values, 0))
}

#[derive(Debug, Clone)]
pub struct OrbitConfig {
    /// orbit length
    pub m: usize,
    /// steps used to estimate Z~ at the end of the orbit
    pub tail: usize,
    pub replicas: usize,
    /// burn-in for the starting direction when `x0` is not supplied
    pub burn_in: usize,
    pub seed: u64,
    /// Starting direction; sampled from nu when absent.
    pub x0: Option<Vector>,
    /// Start of the transposed tail product (all-ones when absent).
    pub y0: Option<Vector>,
}

impl OrbitConfig {
    pub fn new(m: usize, tail: usize, replicas: usize, seed: u64) -> Self {
        OrbitConfig { m, tail, replicas, burn_in: DEFAULT_BURN_IN, seed, x0: None, y0: None }
    }
}

/// Orbit route: one stream split at m. The first m pairs build S_m z and
/// T_m z, the next `tail` pairs estimate Z~ after the shift by m, and the
/// replica value is <z~, T_m z> / (m <z~, S_m z>).
pub fn xi_orbit_average(spec: &EnsembleSpec, cfg: &OrbitConfig) -> Result<XiEstimate> {
    require(cfg.m >= 1, "orbit length m must be at least 1")?;
    require(cfg.tail >= 1, "tail must be at least 1")?;
    require(cfg.replicas >= 1, "replicas must be at least 1")?;
    let d = spec.dim();
    let y0 = cfg.y0.clone().unwrap_or_else(|| Vector::ones_normalized(d)).normalized()?;
    let values = par_replicas(cfg.replicas, |r| {
        let r = r as u64;
        let z = match &cfg.x0 {
            Some(x) => x.clone(),
            None => {
                let mut start = RngStream::for_purpose(cfg.seed, Purpose::OrbitStart, r);
                sample_direction_nu(spec, cfg.burn_in, &mut start)?.unit
            }
        };
        let mut rng = RngStream::for_purpose(cfg.seed, Purpose::OrbitRoute, r);
        let tv = track_vectors(spec, cfg.m, &mut rng, std::slice::from_ref(&z))?;
        let zt = accumulate_direction(spec, cfg.tail, &mut rng, &y0, true)?.unit;
        let tv = &tv[0];
        let den = zt.dot(&tv.sx_hat);
        if den.abs() < DENOMINATOR_FLOOR {
            return Ok(None);
        }
        let num = match &tv.y_hat {
            Some(y) => tv.phi * zt.dot(y),
            None => 0.0,
        };
        Ok(Some(num / den / cfg.m as f64))
    })?;
    let rejected = values.iter().filter(|v| v.is_none()).count();
    check_rejections(rejected, cfg.replicas)?;
    Ok(XiEstimate::from_values(XiMethod::OrbitRoute, values.into_iter().flatten().collect(), rejected))
}

fn perturbed_invertible(a: &Mat) -> bool {
    let sv = a.singular_values();
    sv[0] > 0.0 && sv[sv.len() - 1] / sv[0] >= SINGULARITY_RATIO
}

/// Finite-difference slope (gamma(eps) - gamma(0)) / eps of the top exponent
/// along the perturbation A -> A + eps B. Each replica draws one sequence of
/// pairs and feeds it to every product (common random numbers).
pub fn gamma_eps_derivative(
    spec: &EnsembleSpec,
    eps_list: &[f64],
    steps: usize,
    replicas: usize,
    seed: u64,
) -> Result<Vec<EpsRatio>> {
    require(!eps_list.is_empty(), "at least one eps is required")?;
    require(eps_list.iter().all(|e| *e != 0.0 && e.is_finite()), "eps values must be finite and nonzero")?;
    require(steps >= 1, "steps must be at least 1")?;
    require(replicas >= 1, "replicas must be at least 1")?;

    // Perturbed atoms are checked once up front for finite ensembles.
    let perturbed: Option<Vec<Vec<Mat>>> = if spec.kind().is_finite() {
        let mut table = Vec::with_capacity(eps_list.len());
        for &eps in eps_list {
            let mut row = Vec::with_capacity(spec.atoms().len());
            for (i, atom) in spec.atoms().iter().enumerate() {
                let m = &atom.a + &atom.b.scale(eps);
                if !perturbed_invertible(&m) {
                    return Err(Error::SingularPerturbedAtom { atom: i, eps });
                }
                row.push(m);
            }
            table.push(row);
        }
        Some(table)
    } else {
        None
    };

    let d = spec.dim();
    let runs = par_replicas(replicas, |r| {
        let mut rng = RngStream::for_purpose(seed, Purpose::GammaEps, r as u64);
        let mut prods = vec![Mat::identity(d); eps_list.len() + 1];
        let mut logs = vec![0.0; eps_list.len() + 1];
        for k in 1..=steps {
            let draw = spec.draw(&mut rng);
            for (j, (p, lg)) in prods.iter_mut().zip(logs.iter_mut()).enumerate() {
                let factor = if j == 0 {
                    draw.a.clone().into_owned()
                } else {
                    let eps = eps_list[j - 1];
                    match (&perturbed, draw.atom) {
                        (Some(table), Some(i)) => table[j - 1][i].clone(),
                        _ => {
                            let m = &*draw.a + &draw.b.scale(eps);
                            if !perturbed_invertible(&m) {
                                // continuous ensembles report the step instead of an atom
                                return Err(Error::SingularPerturbedAtom { atom: k, eps });
                            }
                            m
                        }
                    }
                };
                let next = &factor * p;
                let c = next.max_abs();
                if !(c > 0.0) || !c.is_finite() {
                    return Err(Error::Overflow.at_step(k));
                }
                *p = next.scale(1.0 / c);
                *lg += c.ln();
            }
        }
        let totals: Vec<f64> = prods.iter().zip(&logs).map(|(p, lg)| lg + p.spectral_norm().ln()).collect();
        Ok(totals)
    })?;

    let n = steps as f64;
    Ok(eps_list
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let values: Vec<f64> = runs.iter().map(|t| (t[j + 1] - t[0]) / (n * eps)).collect();
            let stats = RunningStats::from_slice(&values);
            EpsRatio { eps, ratio: stats.mean(), std_err: stats.std_err(), replicas: values }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{builtin, parse_ensemble};
    use std::collections::BTreeMap;

    fn none() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn single_atom(a: &str, b: &str) -> EnsembleSpec {
        parse_ensemble(&format!("[[atoms]]\nprob = 1.0\nA = {a}\nB = {b}\n")).unwrap()
    }

    #[test]
    fn lyapunov_pure_rotation_is_zero() {
        let spec = builtin("pure_rotation", &none()).unwrap();
        let est = estimate_lyapunov(&spec, 1000, 4, 1).unwrap();
        assert!(est.gamma.abs() < 1e-10);
        assert!(est.gamma2.unwrap().abs() < 1e-10);
    }

    #[test]
    fn lyapunov_diagonal() {
        let spec = single_atom("[[2.0, 0.0], [0.0, 0.5]]", "[[1.0, 1.0], [0.0, 1.0]]");
        let est = estimate_lyapunov(&spec, 500, 2, 3).unwrap();
        assert!((est.gamma - 2f64.ln()).abs() < 1e-12);
        assert!((est.gamma2.unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(est.std_err_gamma, 0.0);
    }

    #[test]
    fn lyapunov_needs_steps() {
        let spec = builtin("pure_rotation", &none()).unwrap();
        assert!(matches!(estimate_lyapunov(&spec, 50, 1, 1), Err(Error::BadParams(_))));
    }

    #[test]
    fn directions_of_diagonal_atom() {
        let spec = single_atom("[[2.0, 0.0], [0.0, 0.5]]", "[[0.0, 0.0], [0.0, 0.0]]");
        let e1 = Vector::basis(2, 0);
        let z = sample_direction_nu(&spec, 50, &mut RngStream::new(1, 1)).unwrap();
        assert!(delta(&z.unit, &e1).unwrap() <= 1e-6);
        assert!(z.settled);
        let zt = sample_direction_nu_star(&spec, 50, &mut RngStream::new(1, 2)).unwrap();
        assert!(delta(&zt.unit, &e1).unwrap() <= 1e-6);
    }

    #[test]
    fn direction_flags_non_contracting() {
        let rot = builtin("pure_rotation", &none()).unwrap();
        assert!(!sample_direction_nu(&rot, 200, &mut RngStream::new(1, 1)).unwrap().settled);
        let swap = single_atom("[[0.0, 2.0], [1.0, 0.0]]", "[[0.0, 0.0], [0.0, 0.0]]");
        assert!(!sample_direction_nu_star(&swap, 200, &mut RngStream::new(1, 1)).unwrap().settled);
    }

    #[test]
    fn direction_is_deterministic() {
        let spec = builtin("positive_bernoulli", &none()).unwrap();
        let a = sample_direction_nu(&spec, 200, &mut RngStream::new(4, 4)).unwrap();
        let b = sample_direction_nu(&spec, 200, &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(a, b);
        let c = sample_direction_nu_star(&spec, 200, &mut RngStream::new(4, 4)).unwrap();
        let e = sample_direction_nu_star(&spec, 200, &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(c, e);
    }

    #[test]
    fn integral_with_scaled_perturbation_is_exact() {
        let spec =
            builtin("positive_bernoulli", &none()).unwrap().map_atoms(|a| (a.a.clone(), a.a.scale(0.7))).unwrap();
        let est = estimate_xi_integral(&spec, 200, 100, 9).unwrap();
        for v in &est.replicas {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn integral_scalar() {
        let spec = builtin("scalar_iid", &none()).unwrap();
        let est = estimate_xi_integral(&spec, 4000, 10, 2).unwrap();
        assert!((est.value - 1.0).abs() <= 3.0 * est.std_err, "{est:?}");
    }

    #[test]
    fn psi_pure_rotation_exact() {
        let spec = builtin("pure_rotation", &none()).unwrap();
        let x = Vector::new(vec![0.6, 0.8]).unwrap();
        let psi = estimate_xi_psi(&spec, 500, 3, 1, &x).unwrap();
        let phi = estimate_abs_xi_phi(&spec, 500, 3, 1, &x).unwrap();
        for v in &psi.replicas {
            assert!((v - 1f64.cos()).abs() < 1e-10);
        }
        for v in &phi.replicas {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn psi_zero_perturbation() {
        let spec = single_atom("[[2.0, 1.0], [1.0, 1.0]]", "[[0.0, 0.0], [0.0, 0.0]]");
        let est = estimate_xi_psi(&spec, 100, 2, 1, &Vector::basis(2, 0)).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn scalar_psi_and_phi() {
        let spec = builtin("scalar_iid", &none()).unwrap();
        let x = Vector::basis(1, 0);
        let psi = estimate_xi_psi(&spec, 10_000, 32, 5, &x).unwrap();
        assert!((psi.value - 1.0).abs() <= 3.0 * psi.std_err);
        let phi = estimate_abs_xi_phi(&spec, 10_000, 32, 5, &x).unwrap();
        assert!((phi.abs_value - 1.0).abs() <= 3.0 * phi.std_err, "{phi:?}");
    }

    #[test]
    fn orbit_with_scaled_perturbation() {
        let spec =
            builtin("positive_bernoulli", &none()).unwrap().map_atoms(|a| (a.a.clone(), a.a.scale(-0.4))).unwrap();
        for m in [1, 7, 50] {
            let est = xi_orbit_average(&spec, &OrbitConfig::new(m, 50, 4, 3)).unwrap();
            for v in &est.replicas {
                assert!((v + 0.4).abs() < 1e-10, "m={m}: {v}");
            }
        }
    }

    #[test]
    fn orbit_scalar_is_sample_mean() {
        let spec = builtin("scalar_iid", &none()).unwrap();
        let est = xi_orbit_average(&spec, &OrbitConfig::new(2000, 5, 16, 8)).unwrap();
        assert!((est.value - 1.0).abs() <= 3.0 * est.std_err);
    }

    #[test]
    fn gamma_eps_zero_perturbation() {
        let spec = single_atom("[[2.0, 1.0], [1.0, 1.0]]", "[[0.0, 0.0], [0.0, 0.0]]");
        let out = gamma_eps_derivative(&spec, &[1e-3, -1e-2], 200, 2, 1).unwrap();
        for r in out {
            assert_eq!(r.ratio, 0.0);
        }
    }

    #[test]
    fn gamma_eps_scalar_closed_form() {
        let spec = builtin("scalar_iid", &none()).unwrap();
        let eps = 1e-3;
        let out = gamma_eps_derivative(&spec, &[eps], 10_000, 16, 2).unwrap();
        let exact = 0.5 * ((1.0 + eps / 2.0).ln() + (1.0 + 1.5 * eps).ln()) / eps;
        assert!((out[0].ratio - exact).abs() < 2e-3, "{} vs {exact}", out[0].ratio);
    }

    #[test]
    fn gamma_eps_detects_singular_perturbation() {
        let spec = single_atom("[[1.0, 0.0], [0.0, 1.0]]", "[[-1.0, 0.0], [0.0, 0.0]]");
        assert_eq!(
            gamma_eps_derivative(&spec, &[1.0], 10, 1, 1).unwrap_err(),
            Error::SingularPerturbedAtom { atom: 0, eps: 1.0 }
        );
    }
}
