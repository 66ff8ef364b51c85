//! The coupled recursion S_n = A_n S_{n-1}, T_n = B_n S_{n-1} + A_n T_{n-1}.
//!
//! Both matrices are stored divided by |S_n|_2 with the scale kept as a
//! natural log, so products of thousands of factors stay representable.
//! Tracked vectors follow the same recursion restricted to S_n x and T_n x.
//!
//! The exterior square is carried separately (its top singular value decays
//! relative to |S_n|^2 and would underflow inside `s_hat`), and so is an
//! orthogonal frame used to evaluate tr(T_n S_n^-1) without ever inverting
//! the badly conditioned `s_hat`.

use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::linalg::{delta, Mat, Vector, SINGULARITY_RATIO};
use crate::record::{Row, TrackedRow, TrajectoryRecord};
use crate::rng::RngStream;

/// Relative size below which phi (or |U|) counts as an exact zero, scaled by
/// `1 + n` to absorb accumulated rounding.
pub const ZERO_THRESHOLD: f64 = 1e-14;

pub fn zero_threshold(n: usize) -> f64 {
    ZERO_THRESHOLD * (1.0 + n as f64)
}

#[derive(Debug, Clone)]
pub struct TrackedVector {
    pub x0: Vector,
    /// S_n x0 / |S_n x0|
    pub sx_hat: Vector,
    pub log_norm_sx: f64,
    /// |T_n x0| / |S_n x0|
    pub phi: f64,
    /// <S_n x0, T_n x0> / |S_n x0|^2
    pub psi: f64,
    /// T_n x0 / |T_n x0|, absent when phi is zero
    pub y_hat: Option<Vector>,
}

impl TrackedVector {
    fn new(x0: &Vector) -> Result<Self> {
        let x = x0.normalized()?;
        Ok(TrackedVector { x0: x.clone(), sx_hat: x, log_norm_sx: 0.0, phi: 0.0, psi: 0.0, y_hat: None })
    }

    pub fn delta_xy(&self) -> Option<f64> {
        self.y_hat.as_ref().map(|y| delta(&self.sx_hat, y).expect("unit vectors"))
    }

    pub fn sign_gap_plus(&self) -> Option<f64> {
        self.y_hat.as_ref().map(|y| (&self.sx_hat - y).norm())
    }

    pub fn sign_gap_minus(&self) -> Option<f64> {
        self.y_hat.as_ref().map(|y| (&self.sx_hat + y).norm())
    }

    fn step(&mut self, a: &Mat, b: &Mat, n_next: usize) -> Result<()> {
        let a_sx = a.mul_vec(&self.sx_hat);
        let s = a_sx.norm();
        let d = a.dim() as f64;
        if !(s > SINGULARITY_RATIO * a.frobenius_norm() / d.sqrt()) {
            return Err(Error::NonInvertibleA);
        }
        let b_sx = b.mul_vec(&self.sx_hat);
        let tx_raw = match &self.y_hat {
            Some(y) => b_sx.axpy(self.phi, &a.mul_vec(y)),
            None => b_sx,
        };
        let t = tx_raw.norm();
        let phi = t / s;
        let psi = a_sx.dot(&tx_raw) / (s * s);
        if !phi.is_finite() || !psi.is_finite() || !s.is_finite() {
            return Err(Error::Overflow);
        }
        self.sx_hat = a_sx.scale(1.0 / s);
        self.log_norm_sx += s.ln();
        if phi < zero_threshold(n_next) {
            self.phi = 0.0;
            self.psi = 0.0;
            self.y_hat = None;
        } else {
            self.phi = phi;
            self.psi = psi;
            self.y_hat = Some(tx_raw.scale(1.0 / t));
        }
        Ok(())
    }
}

/// Orthogonal frame for the trace cocycle. With S_n = Q_n R_n, the matrix
/// V_n = Q_n^T T_n S_n^-1 Q_n obeys V' = Q'^T B Q R'^-1 + R' V R'^-1 where
/// A Q = Q' R'. The lower triangle of V (diagonal included) evolves on its
/// own and stays bounded; its trace is tr(T_n S_n^-1).
#[derive(Debug, Clone)]
struct TraceFrame {
    q: Mat,
    lower: Mat,
}

impl TraceFrame {
    fn new(d: usize) -> Self {
        TraceFrame { q: Mat::identity(d), lower: Mat::zeros(d) }
    }

    fn step(&mut self, a: &Mat, b: &Mat) -> Result<()> {
        let (q_next, r) = (a * &self.q).qr()?;
        let r_inv = r.upper_triangular_inverse()?;
        let fresh = &(&(&q_next.transpose() * b) * &self.q) * &r_inv;
        let carried = &(&r * &self.lower) * &r_inv;
        self.lower = (&fresh + &carried).lower_part();
        self.q = q_next;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProductState {
    pub n: usize,
    /// S_n / |S_n|_2
    pub s_hat: Mat,
    /// T_n / |S_n|_2
    pub u: Mat,
    /// log |S_n|_2
    pub log_norm_s: f64,
    pub tracked: Vec<TrackedVector>,
    /// True when |U|_2 fell below the zero threshold at the last step.
    pub t_zero: bool,
    /// running sum of tr(B_i A_i^-1)
    pub trace_sum: f64,
    wedge: Option<Mat>,
    log_scale_wedge: f64,
    frame: TraceFrame,
}

pub fn init_state(d: usize, tracked_inits: &[Vector]) -> Result<ProductState> {
    if d == 0 {
        return Err(Error::DimensionTooSmall(0));
    }
    let mut tracked = Vec::with_capacity(tracked_inits.len());
    for x in tracked_inits {
        if x.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.dim() });
        }
        tracked.push(TrackedVector::new(x)?);
    }
    let wedge = if d >= 2 { Some(Mat::identity(d * (d - 1) / 2)) } else { None };
    Ok(ProductState {
        n: 0,
        s_hat: Mat::identity(d),
        u: Mat::zeros(d),
        log_norm_s: 0.0,
        tracked,
        t_zero: true,
        trace_sum: 0.0,
        wedge,
        log_scale_wedge: 0.0,
        frame: TraceFrame::new(d),
    })
}

impl ProductState {
    pub fn dim(&self) -> usize {
        self.s_hat.dim()
    }

    /// S_n recovered at full scale. Overflows for long products.
    pub fn s(&self) -> Mat {
        self.s_hat.scale(self.log_norm_s.exp())
    }

    /// T_n recovered at full scale.
    pub fn t(&self) -> Mat {
        self.u.scale(self.log_norm_s.exp())
    }

    /// log |wedge^2 S_n|_2, absent for d = 1.
    pub fn log_norm_wedge(&self) -> Option<f64> {
        self.wedge.as_ref().map(|w| self.log_scale_wedge + w.spectral_norm().ln())
    }

    /// tr(T_n S_n^-1), evaluated through the orthogonal frame.
    pub fn trace_cocycle(&self) -> f64 {
        self.frame.lower.trace()
    }

    /// tr(U s_hat^-1) by direct inversion. Only usable while `s_hat` is well
    /// conditioned (short products or non-contracting ensembles).
    pub fn trace_cocycle_direct(&self) -> Result<f64> {
        Ok((&self.u * &self.s_hat.invert()?).trace())
    }

    pub fn step(&mut self, a: &Mat, b: &Mat) -> Result<()> {
        let d = self.dim();
        if a.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: a.dim() });
        }
        if b.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: b.dim() });
        }
        let n_next = self.n + 1;
        for tv in &mut self.tracked {
            tv.step(a, b, n_next)?;
        }

        let s_raw = a * &self.s_hat;
        let u_raw = &(b * &self.s_hat) + &(a * &self.u);
        let s = s_raw.spectral_norm();
        if !(s > 0.0) || !s.is_finite() || !u_raw.is_finite() {
            return Err(if s == 0.0 { Error::NonInvertibleA } else { Error::Overflow });
        }
        self.s_hat = s_raw.scale(1.0 / s);
        self.u = u_raw.scale(1.0 / s);
        self.log_norm_s += s.ln();
        self.t_zero = self.u.frobenius_norm() < zero_threshold(n_next);

        if let Some(w) = &self.wedge {
            let w_raw = &a.exterior_square()? * w;
            let scale = w_raw.max_abs();
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::Overflow);
            }
            self.wedge = Some(w_raw.scale(1.0 / scale));
            self.log_scale_wedge += scale.ln();
        }

        self.frame.step(a, b)?;
        self.trace_sum += (b * &a.invert()?).trace();
        self.n = n_next;
        Ok(())
    }

    fn row(&self) -> Row {
        Row {
            n: self.n,
            log_norm_s: self.log_norm_s,
            log_norm_wedge: self.log_norm_wedge(),
            tracked: self
                .tracked
                .iter()
                .map(|tv| TrackedRow {
                    log_norm_sx: tv.log_norm_sx,
                    phi: tv.phi,
                    psi: tv.psi,
                    delta_xy: tv.delta_xy(),
                    sign_gap_plus: tv.sign_gap_plus(),
                    sign_gap_minus: tv.sign_gap_minus(),
                })
                .collect(),
            trace_cocycle: self.trace_cocycle(),
            trace_sum: self.trace_sum,
            t_zero: self.t_zero,
        }
    }
}

/// Drive the engine over `steps` sampled pairs, recording every
/// `record_every` steps and always the last one.
pub fn run_trajectory(
    spec: &EnsembleSpec,
    steps: usize,
    rng: &mut RngStream,
    tracked_inits: &[Vector],
    record_every: usize,
) -> Result<TrajectoryRecord> {
    run_trajectory_with_state(spec, steps, rng, tracked_inits, record_every).map(|(rec, _)| rec)
}

/// As [`run_trajectory`], also returning the final state.
pub fn run_trajectory_with_state(
    spec: &EnsembleSpec,
    steps: usize,
    rng: &mut RngStream,
    tracked_inits: &[Vector],
    record_every: usize,
) -> Result<(TrajectoryRecord, ProductState)> {
    if steps == 0 {
        return Err(Error::BadParams("steps must be at least 1".into()));
    }
    if record_every == 0 {
        return Err(Error::BadParams("record_every must be at least 1".into()));
    }
    let mut state = init_state(spec.dim(), tracked_inits)?;
    let mut record = TrajectoryRecord::new(state.tracked.len());
    for k in 1..=steps {
        let draw = spec.draw(rng);
        state.step(&draw.a, &draw.b).map_err(|e| e.at_step(k))?;
        if let Some(i) = draw.atom {
            record.atoms.push(i);
        }
        if k % record_every == 0 || k == steps {
            record.rows.push(state.row());
        }
    }
    Ok((record, state))
}

/// Vector-only run: follows S_n x and T_n x for each start without the
/// matrix state. Consumes the stream exactly like [`run_trajectory`].
pub fn track_vectors(
    spec: &EnsembleSpec,
    steps: usize,
    rng: &mut RngStream,
    inits: &[Vector],
) -> Result<Vec<TrackedVector>> {
    let mut tracked = Vec::with_capacity(inits.len());
    for x in inits {
        if x.dim() != spec.dim() {
            return Err(Error::DimensionMismatch { expected: spec.dim(), got: x.dim() });
        }
        tracked.push(TrackedVector::new(x)?);
    }
    for k in 1..=steps {
        let draw = spec.draw(rng);
        for tv in &mut tracked {
            tv.step(&draw.a, &draw.b, k).map_err(|e| e.at_step(k))?;
        }
    }
    Ok(tracked)
}

/// Product of the 2d x 2d blocks [[A_i, B_i], [0, A_i]], taken as
/// C_n ... C_1. Returns the (1,1) and (1,2) blocks.
pub fn block_oracle(pairs: &[(Mat, Mat)]) -> Result<(Mat, Mat)> {
    let d = check_pairs(pairs)?;
    let mut acc = Mat::identity(2 * d);
    for (a, b) in pairs {
        let mut rows = vec![vec![0.0; 2 * d]; 2 * d];
        for i in 0..d {
            for j in 0..d {
                rows[i][j] = a[(i, j)];
                rows[i][d + j] = b[(i, j)];
                rows[d + i][d + j] = a[(i, j)];
            }
        }
        acc = &Mat::from_rows(&rows)? * &acc;
        if !acc.is_finite() {
            return Err(Error::Overflow);
        }
    }
    let block = |r0: usize, c0: usize| {
        let rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| acc[(r0 + i, c0 + j)]).collect()).collect();
        Mat::from_rows(&rows)
    };
    Ok((block(0, 0)?, block(0, d)?))
}

/// First-order jets: (V2, D2)(V1, D1) = (V2 V1, V2 D1 + D2 V1).
pub fn dual_product_oracle(pairs: &[(Mat, Mat)]) -> Result<(Mat, Mat)> {
    let d = check_pairs(pairs)?;
    let mut value = Mat::identity(d);
    let mut deriv = Mat::zeros(d);
    for (a, b) in pairs {
        deriv = &(a * &deriv) + &(b * &value);
        value = a * &value;
        if !value.is_finite() || !deriv.is_finite() {
            return Err(Error::Overflow);
        }
    }
    Ok((value, deriv))
}

fn check_pairs(pairs: &[(Mat, Mat)]) -> Result<usize> {
    let d = pairs.first().map(|(a, _)| a.dim()).ok_or(Error::BadParams("empty pair list".into()))?;
    for (a, b) in pairs {
        for m in [a, b] {
            if m.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: m.dim() });
            }
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// Compare tr(T_n S_n^-1) with the running sum of tr(B_i A_i^-1).
pub fn trace_cocycle_check(state: &ProductState, running_sum: f64) -> Result<TraceCheck> {
    if state.n == 0 {
        return Err(Error::BadParams("trace cocycle needs at least one step".into()));
    }
    let lhs = state.trace_cocycle();
    if !lhs.is_finite() {
        return Err(Error::Overflow);
    }
    let ok = (lhs - running_sum).abs() <= 1e-8 * running_sum.abs().max(1.0);
    Ok(TraceCheck { lhs, rhs: running_sum, ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::builtin;
    use crate::linalg::relative_difference;
    use std::collections::BTreeMap;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn init_examples() {
        let s = init_state(2, &[Vector::basis(2, 0)]).unwrap();
        assert_eq!(s.s_hat, Mat::identity(2));
        assert_eq!(s.u, Mat::zeros(2));
        assert_eq!(s.tracked[0].phi, 0.0);
        assert!(init_state(3, &[]).unwrap().tracked.is_empty());
        let s = init_state(2, &[v(&[3.0, 4.0])]).unwrap();
        assert!((s.tracked[0].x0[0] - 0.6).abs() < 1e-15 && (s.tracked[0].x0[1] - 0.8).abs() < 1e-15);
        assert_eq!(init_state(2, &[Vector::zeros(2)]).unwrap_err(), Error::ZeroVector);
    }

    #[test]
    fn one_step_recovers_pair() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![0.5, 3.0]]).unwrap();
        let b = Mat::from_rows(&[vec![-1.0, 0.25], vec![4.0, 1.0]]).unwrap();
        let mut s = init_state(2, &[]).unwrap();
        s.step(&a, &b).unwrap();
        assert!(relative_difference(&s.s(), &a, a.frobenius_norm()) < 1e-15);
        assert!(relative_difference(&s.t(), &b, b.frobenius_norm()) < 1e-15);
    }

    #[test]
    fn zero_perturbation_stays_zero() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mut s = init_state(2, &[Vector::basis(2, 0)]).unwrap();
        for _ in 0..20 {
            s.step(&a, &Mat::zeros(2)).unwrap();
            assert_eq!(s.u, Mat::zeros(2));
            assert_eq!(s.tracked[0].phi, 0.0);
            assert_eq!(s.tracked[0].psi, 0.0);
            assert!(s.t_zero);
        }
    }

    #[test]
    fn pure_rotation_closed_form() {
        let theta = 1.0;
        let mut s = init_state(2, &[v(&[0.3, -0.7])]).unwrap();
        for n in 1..=100usize {
            s.step(&Mat::rotation(theta), &Mat::identity(2)).unwrap();
            let t_expected = Mat::rotation((n as f64 - 1.0) * theta).scale(n as f64);
            assert!(relative_difference(&s.s(), &Mat::rotation(n as f64 * theta), 1.0) < 1e-12);
            assert!(relative_difference(&s.t(), &t_expected, n as f64) < 1e-12);
            let tv = &s.tracked[0];
            assert!((tv.phi / n as f64 - 1.0).abs() < 1e-12);
            assert!((tv.psi / n as f64 - theta.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut s = init_state(2, &[]).unwrap();
        assert!(matches!(s.step(&Mat::identity(3), &Mat::zeros(3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn oracles_single_pair() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        for f in [block_oracle, dual_product_oracle] {
            let (s, t) = f(&[(a.clone(), b.clone())]).unwrap();
            assert_eq!(s, a);
            assert_eq!(t, b);
        }
    }

    #[test]
    fn dual_oracle_scaled_perturbation() {
        let a = Mat::from_rows(&[vec![1.0, 0.5], vec![0.25, 1.0]]).unwrap();
        let pairs: Vec<(Mat, Mat)> = (0..10).map(|_| (a.clone(), a.scale(0.3))).collect();
        let (s, t) = dual_product_oracle(&pairs).unwrap();
        assert!(relative_difference(&t, &s.scale(3.0), s.frobenius_norm()) < 1e-13);
    }

    #[test]
    fn oracle_overflow() {
        let big = Mat::diag(&[1e200, 1.0]);
        let pairs = vec![(big.clone(), Mat::zeros(2)); 3];
        assert_eq!(block_oracle(&pairs).unwrap_err(), Error::Overflow);
        assert_eq!(dual_product_oracle(&pairs).unwrap_err(), Error::Overflow);
    }

    #[test]
    fn trace_zero_perturbation() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mut s = init_state(2, &[]).unwrap();
        for _ in 0..10 {
            s.step(&a, &Mat::zeros(2)).unwrap();
        }
        let c = trace_cocycle_check(&s, s.trace_sum).unwrap();
        assert_eq!((c.lhs, c.rhs, c.ok), (0.0, 0.0, true));
    }

    #[test]
    fn trace_frame_matches_direct_on_short_product() {
        let spec = builtin("positive_bernoulli", &BTreeMap::new()).unwrap();
        let mut rng = RngStream::new(5, 5);
        let mut s = init_state(2, &[]).unwrap();
        for _ in 0..8 {
            let (a, b) = spec.sample_pair(&mut rng);
            s.step(&a, &b).unwrap();
        }
        let direct = s.trace_cocycle_direct().unwrap();
        assert!((s.trace_cocycle() - direct).abs() < 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn diag_rotation_e2_overflows_eventually() {
        let spec = builtin("diag_rotation", &BTreeMap::new()).unwrap();
        let mut rng = RngStream::new(0, 0);
        let err = run_trajectory(&spec, 2000, &mut rng, &[Vector::basis(2, 1)], 1).unwrap_err();
        assert!(matches!(err, Error::AtStep { source, .. } if *source == Error::Overflow));
    }

    #[test]
    fn record_stride_keeps_last_row() {
        let spec = builtin("signed_pair", &BTreeMap::new()).unwrap();
        let rec = run_trajectory(&spec, 10, &mut RngStream::new(1, 1), &[], 4).unwrap();
        let ns: Vec<usize> = rec.rows.iter().map(|r| r.n).collect();
        assert_eq!(ns, vec![4, 8, 10]);
        assert_eq!(rec.atoms.len(), 10);
    }

    #[test]
    fn zero_steps_rejected() {
        let spec = builtin("signed_pair", &BTreeMap::new()).unwrap();
        assert!(matches!(run_trajectory(&spec, 0, &mut RngStream::new(1, 1), &[], 1), Err(Error::BadParams(_))));
    }
}
