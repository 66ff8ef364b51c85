//! Small dense real matrices (d is typically 1 to 8).
//!
//! Everything here works on row-major `Vec<f64>` storage. The singular value
//! decomposition is a one-sided (Hestenes) Jacobi iteration, which is accurate
//! to high relative precision at these sizes and needs no external solver.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inversion is refused when sigma_min / sigma_max falls below this.
pub const SINGULARITY_RATIO: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    dim: usize,
    data: Vec<f64>,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// alpha_1 >= ... >= alpha_d >= 0
    pub singular_values: Vec<f64>,
    pub left_vectors: Mat,
    pub right_vectors: Mat,
}

impl Mat {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "matrix dimension must be positive");
        Mat { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Mat::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Counter-clockwise rotation of the plane by `theta` radians.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Mat::from_row_major(2, vec![c, -s, s, c]).expect("finite rotation")
    }

    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionTooSmall(0));
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Mat { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Mat::from_row_major(dim, data)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let d = self.dim;
        let mut t = Mat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { dim: self.dim, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn mul_vec(&self, v: &Vector) -> Vector {
        debug_assert_eq!(self.dim, v.dim());
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * d..(i + 1) * d];
            *o = row.iter().zip(v.data.iter()).map(|(a, b)| a * b).sum();
        }
        Vector { data: out }
    }

    /// `self^T v` without forming the transpose.
    pub fn tr_mul_vec(&self, v: &Vector) -> Vector {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for i in 0..d {
            let vi = v.data[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.data[i * d + j] * vi;
            }
        }
        Vector { data: out }
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector { data: (0..self.dim).map(|i| self[(i, j)]).collect() }
    }

    /// Lower triangle including the diagonal; zeros above.
    pub fn lower_part(&self) -> Mat {
        let mut m = self.clone();
        for i in 0..self.dim {
            for j in i + 1..self.dim {
                m[(i, j)] = 0.0;
            }
        }
        m
    }

    /// Singular values only, sorted nonincreasing.
    pub fn singular_values(&self) -> Vec<f64> {
        let (w, _) = jacobi_columns(self, false);
        let d = self.dim;
        let mut sv: Vec<f64> = (0..d).map(|j| column_norm(&w, d, j)).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    pub fn svd(&self) -> SvdResult {
        let d = self.dim;
        let (w, v) = jacobi_columns(self, true);
        let v = v.expect("right vectors requested");
        let norms: Vec<f64> = (0..d).map(|j| column_norm(&w, d, j)).collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

        let scale = norms.iter().cloned().fold(0.0, f64::max);
        let mut u = Mat::zeros(d);
        let mut vv = Mat::zeros(d);
        let mut sv = Vec::with_capacity(d);
        let mut filled = vec![false; d];
        for (k, &j) in order.iter().enumerate() {
            sv.push(norms[j]);
            for i in 0..d {
                vv[(i, k)] = v[(i, j)];
            }
            if norms[j] > f64::EPSILON * scale.max(f64::MIN_POSITIVE) * (d as f64) && norms[j] > 0.0 {
                for i in 0..d {
                    u[(i, k)] = w[i * d + j] / norms[j];
                }
                filled[k] = true;
            }
        }
        complete_orthonormal(&mut u, &filled);
        SvdResult { singular_values: sv, left_vectors: u, right_vectors: vv }
    }

    pub fn spectral_norm(&self) -> f64 {
        self.singular_values()[0]
    }

    /// Product of the two largest singular values, i.e. the spectral norm of
    /// the exterior square.
    pub fn exterior_square_norm(&self) -> Result<f64> {
        if self.dim < 2 {
            return Err(Error::DimensionTooSmall(self.dim));
        }
        let sv = self.singular_values();
        Ok(sv[0] * sv[1])
    }

    /// Matrix of the induced map on the exterior square, in the orthonormal
    /// basis e_i ^ e_j (i < j, lexicographic).
    pub fn exterior_square(&self) -> Result<Mat> {
        let d = self.dim;
        if d < 2 {
            return Err(Error::DimensionTooSmall(d));
        }
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
        let n = pairs.len();
        let mut out = Mat::zeros(n);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            for (c, &(k, l)) in pairs.iter().enumerate() {
                out[(r, c)] = self[(i, k)] * self[(j, l)] - self[(i, l)] * self[(j, k)];
            }
        }
        Ok(out)
    }

    /// Gauss-Jordan inverse with partial pivoting. Refuses matrices whose
    /// singular value ratio is below [`SINGULARITY_RATIO`].
    pub fn invert(&self) -> Result<Mat> {
        let sv = self.singular_values();
        let ratio = if sv[0] > 0.0 { sv[sv.len() - 1] / sv[0] } else { 0.0 };
        if !(ratio >= SINGULARITY_RATIO) {
            return Err(Error::SingularMatrix { ratio });
        }
        let d = self.dim;
        let mut a = self.clone();
        let mut inv = Mat::identity(d);
        for col in 0..d {
            let pivot =
                (col..d).max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs())).expect("nonempty range");
            if pivot != col {
                for k in 0..d {
                    a.data.swap(col * d + k, pivot * d + k);
                    inv.data.swap(col * d + k, pivot * d + k);
                }
            }
            let p = a[(col, col)];
            for k in 0..d {
                a[(col, k)] /= p;
                inv[(col, k)] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = a[(r, col)];
                    if f != 0.0 {
                        for k in 0..d {
                            a[(r, k)] -= f * a[(col, k)];
                            inv[(r, k)] -= f * inv[(col, k)];
                        }
                    }
                }
            }
        }
        Ok(inv)
    }

    /// Thin QR of a square matrix by Gram-Schmidt with one reorthogonalisation
    /// pass. `R` is upper triangular; `Q` has orthonormal columns.
    pub fn qr(&self) -> Result<(Mat, Mat)> {
        let d = self.dim;
        let mut q = Mat::zeros(d);
        let mut r = Mat::zeros(d);
        for j in 0..d {
            let mut v = self.column(j);
            for _ in 0..2 {
                for i in 0..j {
                    let qi = q.column(i);
                    let c = qi.dot(&v);
                    r[(i, j)] += c;
                    v = v.axpy(-c, &qi);
                }
            }
            let n = v.norm();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::SingularMatrix { ratio: 0.0 });
            }
            r[(j, j)] = n;
            for i in 0..d {
                q[(i, j)] = v.data[i] / n;
            }
        }
        Ok((q, r))
    }

    /// Inverse of an upper-triangular matrix by back substitution.
    pub fn upper_triangular_inverse(&self) -> Result<Mat> {
        let d = self.dim;
        let mut inv = Mat::zeros(d);
        for j in 0..d {
            if self[(j, j)] == 0.0 {
                return Err(Error::SingularMatrix { ratio: 0.0 });
            }
        }
        for col in 0..d {
            for i in (0..=col).rev() {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for k in i + 1..=col {
                    s -= self[(i, k)] * inv[(k, col)];
                }
                inv[(i, col)] = s / self[(i, i)];
            }
        }
        Ok(inv)
    }
}

fn column_norm(w: &[f64], d: usize, j: usize) -> f64 {
    (0..d).map(|i| w[i * d + j] * w[i * d + j]).sum::<f64>().sqrt()
}

/// One-sided Jacobi: orthogonalise the columns of `m` by plane rotations.
/// Returns the rotated columns (row-major) and, optionally, the accumulated
/// right rotation.
fn jacobi_columns(m: &Mat, want_v: bool) -> (Vec<f64>, Option<Mat>) {
    let d = m.dim;
    let mut w = m.data.clone();
    let mut v = if want_v { Some(Mat::identity(d)) } else { None };
    if d == 1 {
        return (w, v);
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d - 1 {
            for q in p + 1..d {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..d {
                    let wp = w[i * d + p];
                    let wq = w[i * d + q];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..d {
                    let wp = w[i * d + p];
                    let wq = w[i * d + q];
                    w[i * d + p] = c * wp - s * wq;
                    w[i * d + q] = s * wp + c * wq;
                }
                if let Some(v) = v.as_mut() {
                    for i in 0..d {
                        let vp = v[(i, p)];
                        let vq = v[(i, q)];
                        v[(i, p)] = c * vp - s * vq;
                        v[(i, q)] = s * vp + c * vq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

/// Fill the columns of `u` not marked in `filled` with an orthonormal
/// completion of the filled ones.
fn complete_orthonormal(u: &mut Mat, filled: &[bool]) {
    let d = u.dim;
    let mut filled = filled.to_vec();
    let mut candidate = 0;
    for k in 0..d {
        if filled[k] {
            continue;
        }
        loop {
            assert!(candidate < d, "orthonormal completion ran out of basis vectors");
            let mut v = Vector::basis(d, candidate);
            candidate += 1;
            for _ in 0..2 {
                for j in (0..d).filter(|&j| filled[j]) {
                    let uj = u.column(j);
                    let c = uj.dot(&v);
                    v = v.axpy(-c, &uj);
                }
            }
            let n = v.norm();
            if n > 1e-8 {
                for i in 0..d {
                    u[(i, k)] = v.data[i] / n;
                }
                filled[k] = true;
                break;
            }
        }
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

impl Mul<&Mat> for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * d..(k + 1) * d];
                let o = &mut out[i * d..(i + 1) * d];
                for j in 0..d {
                    o[j] += a * row[j];
                }
            }
        }
        Mat { dim: d, data: out }
    }
}

impl Add<&Mat> for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        Mat { dim: self.dim, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub<&Mat> for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        debug_assert_eq!(self.dim, rhs.dim);
        Mat { dim: self.dim, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.dim)).finish()
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::DimensionTooSmall(0));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Vector { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Vector::zeros(dim);
        v.data[i] = 1.0;
        v
    }

    /// All-ones vector scaled to unit length.
    pub fn ones_normalized(dim: usize) -> Self {
        Vector { data: vec![1.0 / (dim as f64).sqrt(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector { data: self.data.iter().map(|x| x * s).collect() }
    }

    /// `self + a * x`
    pub fn axpy(&self, a: f64, x: &Vector) -> Vector {
        Vector { data: self.data.iter().zip(&x.data).map(|(s, xi)| s + a * xi).collect() }
    }

    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(self.scale(1.0 / n))
    }

    /// Flip the sign so the entry of largest magnitude (first on ties) is
    /// positive.
    pub fn canonical_sign(&self) -> Vector {
        let mut best = 0;
        for (i, x) in self.data.iter().enumerate() {
            if x.abs() > self.data[best].abs() {
                best = i;
            }
        }
        if self.data[best] < 0.0 {
            self.scale(-1.0)
        } else {
            self.clone()
        }
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl Add<&Vector> for &Vector {
    type Output = Vector;
    fn add(self, rhs: &Vector) -> Vector {
        self.axpy(1.0, rhs)
    }
}

impl Sub<&Vector> for &Vector {
    type Output = Vector;
    fn sub(self, rhs: &Vector) -> Vector {
        self.axpy(-1.0, rhs)
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

pub fn spectral_norm(m: &Mat) -> f64 {
    m.spectral_norm()
}

pub fn invert(m: &Mat) -> Result<Mat> {
    m.invert()
}

pub fn exterior_square_norm(m: &Mat) -> Result<f64> {
    m.exterior_square_norm()
}

/// Absolute sine of the angle between two nonzero vectors.
pub fn delta(x: &Vector, y: &Vector) -> Result<f64> {
    let nx = x.norm();
    let ny = y.norm();
    if !(nx > 0.0) || !(ny > 0.0) {
        return Err(Error::ZeroVector);
    }
    // |x - y| |x + y| / 2 = sin(angle) for unit x, y; no cancellation near 0
    let (ux, uy) = (x.scale(1.0 / nx), y.scale(1.0 / ny));
    Ok(((&ux - &uy).norm() * (&ux + &uy).norm() / 2.0).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaBounds {
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

/// Sandwich of the projective distance between unit vectors:
/// `|x - chi y| / sqrt(2) <= delta(x, y) <= |x - y|`, where chi is the sign
/// of the inner product.
pub fn delta_equiv_bounds(x: &Vector, y: &Vector) -> Result<DeltaBounds> {
    for v in [x, y] {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::NotNormalised(n));
        }
    }
    let chi = if x.dot(y) >= 0.0 { 1.0 } else { -1.0 };
    let lower = x.axpy(-chi, y).norm() / std::f64::consts::SQRT_2;
    let upper = (x - y).norm();
    let d = delta(x, y)?;
    let slack = 1e-12;
    Ok(DeltaBounds { lower, upper, holds: lower <= d + slack && d <= upper + slack })
}

/// Normwise relative difference `|a - b|_F / max(|reference|_F, floor)`.
pub fn relative_difference(a: &Mat, b: &Mat, reference: f64) -> f64 {
    (a - b).frobenius_norm() / reference.max(f64::MIN_POSITIVE)
}
