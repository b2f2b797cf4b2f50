//! SO(3) and its Lie algebra so(3) in the axis-angle parameterization.
//!
//! Everything here works in radians on `f64`. Values are plain `Copy` types and
//! every function is pure.

#[allow(unused_imports)]
use num_traits::Float;

use core::f64::consts::PI;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this angle the trigonometric coefficients of the exponential map are
/// evaluated by their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-4;
/// Within this distance of π the logarithm switches to the symmetric-part branch.
pub const NEAR_PI: f64 = 1e-6;
/// Analytic loss gradient is used for φ in (GRAD_MARGIN, π − GRAD_MARGIN).
pub const GRAD_MARGIN: f64 = 1e-5;
/// Step of the central-difference fallback gradient.
pub const FD_STEP: f64 = 1e-6;
/// Orthogonality and determinant tolerance accepted by [`log_map`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Axis-angle vector: direction is the rotation axis, norm is the angle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub const ZERO: AxisAngle = AxisAngle([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle([x, y, z])
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm(axis);
        if n == 0.0 {
            return Self::ZERO;
        }
        AxisAngle(scale(axis, angle / n))
    }

    /// Angle θ = ‖r‖₂.
    pub fn angle(&self) -> f64 {
        norm(self.0)
    }

    pub fn to_rotation(&self) -> RotationMatrix {
        exp_map(*self)
    }

    pub fn canonicalize(&self) -> AxisAngle {
        canonicalize(*self)
    }

    /// Converts a unit quaternion `(w, x, y, z)` to axis-angle. The result is
    /// canonical (θ ≤ π) regardless of the sign of `w`.
    pub fn from_unit_quaternion(q: [f64; 4]) -> AxisAngle {
        let v = [q[1], q[2], q[3]];
        let s = norm(v);
        if s == 0.0 {
            return Self::ZERO;
        }
        let theta = 2.0 * s.atan2(q[0]);
        canonicalize(AxisAngle(scale(v, theta / s)))
    }
}

/// Element of so(3); `m + mᵀ = 0` holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewMatrix {
    m: Mat3,
}

impl SkewMatrix {
    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    /// `r× · v = r × v`.
    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.m, v)
    }
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix {
    m: Mat3,
}

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix = RotationMatrix { m: IDENTITY };

    /// Validates `m` against the rotation tolerance.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        check_rotation(&m, ROTATION_TOLERANCE)?;
        Ok(RotationMatrix { m })
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix { m: transpose(&self.m) }
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        RotationMatrix { m: mat_mul(&self.m, &other.m) }
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.m, v)
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn determinant(&self) -> f64 {
        det(&self.m)
    }

    pub fn log(&self) -> AxisAngle {
        log_unchecked(&self.m)
    }
}

pub(crate) const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// The skew-symmetric matrix `r×`.
pub fn skew(r: AxisAngle) -> SkewMatrix {
    SkewMatrix { m: skew_raw(r.0) }
}

fn skew_raw(r: Vec3) -> Mat3 {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

/// Coefficients `sinθ/θ` and `(1−cosθ)/θ²` of the exponential map.
fn exp_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 * (1.0 - t2 / 20.0), 0.5 - t2 / 24.0 * (1.0 - t2 / 30.0))
    } else {
        let half = (0.5 * theta).sin() / theta;
        (theta.sin() / theta, 2.0 * half * half)
    }
}

/// Derivatives of the exponential-map coefficients divided by θ:
/// `(d/dθ (sinθ/θ)) / θ` and `(d/dθ ((1−cosθ)/θ²)) / θ`.
fn exp_coefficient_slopes(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-2 {
        let c = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0 + t2 * t2 * t2 / 45360.0;
        let d = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0 + t2 * t2 * t2 / 453600.0;
        (c, d)
    } else {
        let (s, co) = (theta.sin(), theta.cos());
        let c = (theta * co - s) / (t2 * theta);
        let d = (theta * s - 2.0 * (1.0 - co)) / (t2 * t2);
        (c, d)
    }
}

/// Exponential map `so(3) → SO(3)`.
pub fn exp_map(r: AxisAngle) -> RotationMatrix {
    let theta = r.angle();
    let (a, b) = exp_coefficients(theta);
    let k = skew_raw(r.0);
    let k2 = mat_mul(&k, &k);
    let mut m = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    RotationMatrix { m }
}

/// Partial derivatives `∂exp(r)/∂r_k` for k = 0, 1, 2.
pub fn exp_map_jacobian(r: AxisAngle) -> [Mat3; 3] {
    let theta = r.angle();
    let (a, b) = exp_coefficients(theta);
    let (c, d) = exp_coefficient_slopes(theta);
    let k = skew_raw(r.0);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (axis, dm) in out.iter_mut().enumerate() {
        let mut unit = [0.0; 3];
        unit[axis] = 1.0;
        let e = skew_raw(unit);
        let ek = mat_mul(&e, &k);
        let ke = mat_mul(&k, &e);
        let rk = r.0[axis];
        for i in 0..3 {
            for j in 0..3 {
                dm[i][j] = c * rk * k[i][j]
                    + a * e[i][j]
                    + d * rk * k2[i][j]
                    + b * (ek[i][j] + ke[i][j]);
            }
        }
    }
    out
}

/// Rotation angle `arccos((trace − 1)/2)`, argument clamped to [−1, 1].
pub fn rotation_magnitude(rot: &RotationMatrix) -> f64 {
    angle_from_trace(rot.trace())
}

fn angle_from_trace(trace: f64) -> f64 {
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Logarithmic map `SO(3) → so(3)`, returned as an axis-angle vector with norm φ(R).
pub fn log_map(rot: &RotationMatrix) -> Result<AxisAngle> {
    check_rotation(&rot.m, ROTATION_TOLERANCE)?;
    Ok(log_unchecked(&rot.m))
}

fn log_unchecked(m: &Mat3) -> AxisAngle {
    // vee((R − Rᵀ)/2) = sin φ · axis
    let v = [
        0.5 * (m[2][1] - m[1][2]),
        0.5 * (m[0][2] - m[2][0]),
        0.5 * (m[1][0] - m[0][1]),
    ];
    let sin_phi = norm(v);
    let cos_phi = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let phi = sin_phi.atan2(cos_phi);

    if phi < SMALL_ANGLE {
        // φ / sin φ = 1 + φ²/6 + O(φ⁴)
        return AxisAngle(scale(v, 1.0 + phi * phi / 6.0));
    }
    if phi < PI - NEAR_PI {
        return AxisAngle(scale(v, phi / sin_phi));
    }

    // Near π: (R + Rᵀ)/2 − cos φ·I = (1 − cos φ)·a·aᵀ.
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = 0.5 * (m[i][j] + m[j][i]);
        }
        s[i][i] -= cos_phi;
    }
    let mut pivot = 0;
    for i in 1..3 {
        if s[i][i] > s[pivot][pivot] {
            pivot = i;
        }
    }
    let mut axis = s[pivot];
    let n = norm(axis);
    axis = scale(axis, 1.0 / n);
    let flip = if sin_phi > 1e-12 {
        dot(axis, v) < 0.0
    } else {
        axis.iter()
            .find(|c| **c != 0.0)
            .is_some_and(|c| *c < 0.0)
    };
    if flip {
        axis = scale(axis, -1.0);
    }
    AxisAngle(scale(axis, phi))
}

/// Geodesic distance `φ(R̂Rᵀ)` between the rotations of two axis-angle vectors.
pub fn geodesic_loss(r_hat: AxisAngle, r: AxisAngle) -> f64 {
    geodesic_distance(&exp_map(r_hat), &exp_map(r))
}

/// Geodesic distance between two rotation matrices, `φ(ABᵀ)`.
///
/// The cosine comes from the Frobenius inner product and the sine from the skew
/// part of `ABᵀ`; both are exactly symmetric in `a` and `b`, and `atan2` keeps
/// full precision near 0 where arccos of the trace loses half the digits.
pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    let cos_phi = ((frobenius_inner(&a.m, &b.m) - 1.0) / 2.0).clamp(-1.0, 1.0);
    let (a, b) = (&a.m, &b.m);
    let skew = |i: usize, j: usize| -> f64 { (0..3).map(|k| a[i][k] * b[j][k] - a[j][k] * b[i][k]).sum() };
    let sin_phi = 0.5 * norm([skew(2, 1), skew(0, 2), skew(1, 0)]);
    sin_phi.atan2(cos_phi)
}

/// `∂ geodesic_loss(r_hat, r) / ∂ r_hat`.
///
/// Uses the chain rule through the exponential map and the angle while the loss lies
/// in (1e−5, π − 1e−5). Closer to 0 or π the arccos derivative blows up and the
/// gradient falls back to central differences with step 1e−6.
pub fn geodesic_loss_grad(r_hat: AxisAngle, r: AxisAngle) -> Vec3 {
    let target = exp_map(r);
    let phi = geodesic_distance(&exp_map(r_hat), &target);
    if phi <= GRAD_MARGIN || phi >= PI - GRAD_MARGIN {
        return central_difference_grad(r_hat, &target);
    }
    let dphi_dcos = -1.0 / phi.sin();
    let jac = exp_map_jacobian(r_hat);
    let mut g = [0.0; 3];
    for k in 0..3 {
        g[k] = dphi_dcos * 0.5 * frobenius_inner(&jac[k], &target.m);
    }
    g
}

fn central_difference_grad(r_hat: AxisAngle, target: &RotationMatrix) -> Vec3 {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let mut plus = r_hat;
        let mut minus = r_hat;
        plus.0[k] += FD_STEP;
        minus.0[k] -= FD_STEP;
        let lp = geodesic_distance(&exp_map(plus), target);
        let lm = geodesic_distance(&exp_map(minus), target);
        g[k] = (lp - lm) / (2.0 * FD_STEP);
    }
    g
}

/// Maps any axis-angle vector to the equivalent one with θ ≤ π.
pub fn canonicalize(r: AxisAngle) -> AxisAngle {
    let theta = r.angle();
    if theta <= PI {
        return r;
    }
    let axis = scale(r.0, 1.0 / theta);
    let wrapped = theta % (2.0 * PI);
    if wrapped > PI {
        AxisAngle(scale(axis, wrapped - 2.0 * PI))
    } else {
        AxisAngle(scale(axis, wrapped))
    }
}

fn check_rotation(m: &Mat3, tol: f64) -> Result<()> {
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NotARotation("non-finite entry".into()));
    }
    let mmt = mat_mul(m, &transpose(m));
    let mut err = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let e = mmt[i][j] - IDENTITY[i][j];
            err += e * e;
        }
    }
    let err = err.sqrt();
    if err > tol {
        return Err(Error::NotARotation(alloc::format!("|R Rᵀ − I|_F = {err:e}")));
    }
    let d = det(m);
    if (d - 1.0).abs() > tol {
        return Err(Error::NotARotation(alloc::format!("det = {d}")));
    }
    Ok(())
}

// Small dense helpers shared with the rest of the crate.

pub(crate) fn norm(v: Vec3) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn scale(v: Vec3, s: f64) -> Vec3 {
    [v[0] * s, v[1] * s, v[2] * s]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn frobenius_inner(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[i][j] * b[i][j];
        }
    }
    s
}
