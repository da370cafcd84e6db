//! Quaternion, rigid-transform and covariance primitives.
//!
//! Quaternions are scalar-first `[w, x, y, z]`. Every differentiable map here
//! has a matching `*_backward` that returns vector-Jacobian products, so the
//! deformation chain can be differentiated without an autodiff graph.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this `sin(phi)` slerp degenerates to normalized linear interpolation.
pub const SLERP_LERP_THRESHOLD: f64 = 1e-6;

/// Below this angle the slerp weight derivatives switch to their series form.
const SLERP_SERIES_ANGLE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Rotation whose axis-angle vector is `v`.
    pub fn from_rotation_vector(v: Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::z(), angle)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalize(self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            Self::IDENTITY
        } else {
            self.scale(1.0 / n)
        }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotation angle between the two rotations, in `[0, pi]`.
    pub fn angle_to(self, other: Self) -> f64 {
        let a = self.normalize();
        let mut b = other.normalize();
        if a.dot(b) < 0.0 {
            b = -b;
        }
        4.0 * (b - a).norm().atan2((b + a).norm())
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(self) -> Mat3 {
        let Quaternion { w, x, y, z } = self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        self.to_rotation_matrix() * v
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w + b.w, self.x + b.x, self.y + b.y, self.z + b.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w - b.w, self.x - b.x, self.y - b.y, self.z - b.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

pub fn quat_mul(a: Quaternion, b: Quaternion) -> Quaternion {
    a * b
}

/// Vector-Jacobian product of `a * b`: returns `(dL/da, dL/db)`.
pub fn quat_mul_backward(a: Quaternion, b: Quaternion, g: Quaternion) -> (Quaternion, Quaternion) {
    // The product is bilinear, so each partial is the product with the
    // other factor's conjugate-side matrix transposed.
    let ga = Quaternion::new(
        g.w * b.w + g.x * b.x + g.y * b.y + g.z * b.z,
        -g.w * b.x + g.x * b.w - g.y * b.z + g.z * b.y,
        -g.w * b.y + g.x * b.z + g.y * b.w - g.z * b.x,
        -g.w * b.z - g.x * b.y + g.y * b.x + g.z * b.w,
    );
    let gb = Quaternion::new(
        g.w * a.w + g.x * a.x + g.y * a.y + g.z * a.z,
        -g.w * a.x + g.x * a.w + g.y * a.z - g.z * a.y,
        -g.w * a.y - g.x * a.z + g.y * a.w + g.z * a.x,
        -g.w * a.z + g.x * a.y - g.y * a.x + g.z * a.w,
    );
    (ga, gb)
}

/// Vector-Jacobian product of `q / |q|`.
pub fn normalize_backward(q: Quaternion, g: Quaternion) -> Quaternion {
    let n = q.norm();
    let u = q.scale(1.0 / n);
    (g - u.scale(u.dot(g))).scale(1.0 / n)
}

/// Vector-Jacobian product of [`Quaternion::to_rotation_matrix`] given `dL/dR`.
pub fn rotation_matrix_backward(q: Quaternion, g: &Mat3) -> Quaternion {
    let Quaternion { w, x, y, z } = q;
    let (g00, g01, g02) = (g[(0, 0)], g[(0, 1)], g[(0, 2)]);
    let (g10, g11, g12) = (g[(1, 0)], g[(1, 1)], g[(1, 2)]);
    let (g20, g21, g22) = (g[(2, 0)], g[(2, 1)], g[(2, 2)]);
    let dw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21);
    let dx = 2.0 * (y * g01 + z * g02 + y * g10 - 2.0 * x * g11 - w * g12 + z * g20 + w * g21
        - 2.0 * x * g22);
    let dy = 2.0 * (-2.0 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21
        - 2.0 * y * g22);
    let dz = 2.0 * (-2.0 * z * g00 - w * g01 + x * g02 + w * g10 - 2.0 * z * g11 + y * g12
        + x * g20
        + y * g21);
    Quaternion::new(dw, dx, dy, dz)
}

/// `sin(c*phi)/sin(phi)` and `d/dphi[sin(c*phi)/sin(phi)] / sin(phi)`.
fn slerp_weight(c: f64, phi: f64, sin_phi: f64) -> (f64, f64) {
    let value = (c * phi).sin() / sin_phi;
    let deriv_over_sin = if phi < SLERP_SERIES_ANGLE {
        let k = c * (1.0 - c * c);
        k / 3.0 + phi * phi * k * (4.0 - c * c) / 30.0
    } else {
        (c * (c * phi).cos() * sin_phi - (c * phi).sin() * phi.cos()) / (sin_phi * sin_phi * sin_phi)
    };
    (value, deriv_over_sin)
}

/// Shortest-arc sign and interpolation angle for two unit quaternions.
fn slerp_frame(q0: Quaternion, q1: Quaternion) -> (f64, Quaternion, f64) {
    let sign = if q0.dot(q1) < 0.0 { -1.0 } else { 1.0 };
    let q1s = q1.scale(sign);
    // Equals arccos(clamp(q0 . q1s)) on the unit sphere but stays accurate
    // when the two quaternions are nearly parallel.
    let phi = 2.0 * (q1s - q0).norm().atan2((q1s + q0).norm());
    (sign, q1s, phi)
}

/// Spherical linear interpolation along the shortest arc from `q0` (`u = 0`)
/// to `q1` (`u = 1`). Inputs must be unit quaternions.
pub fn slerp(q0: Quaternion, q1: Quaternion, u: f64) -> Quaternion {
    let (_, q1s, phi) = slerp_frame(q0, q1);
    let sin_phi = phi.sin();
    if sin_phi < SLERP_LERP_THRESHOLD {
        return (q0.scale(1.0 - u) + q1s.scale(u)).normalize();
    }
    let (a, _) = slerp_weight(1.0 - u, phi, sin_phi);
    let (b, _) = slerp_weight(u, phi, sin_phi);
    q0.scale(a) + q1s.scale(b)
}

/// Whether [`slerp`] takes its linear fallback for this pair.
pub fn slerp_uses_lerp(q0: Quaternion, q1: Quaternion) -> bool {
    let (_, _, phi) = slerp_frame(q0, q1);
    phi.sin() < SLERP_LERP_THRESHOLD
}

/// Vector-Jacobian product of [`slerp`] for unit inputs. Only the components
/// tangent to the unit sphere are meaningful; callers that normalize first get
/// exact gradients through [`normalize_backward`].
pub fn slerp_backward(
    q0: Quaternion,
    q1: Quaternion,
    u: f64,
    g: Quaternion,
) -> (Quaternion, Quaternion) {
    let (sign, q1s, phi) = slerp_frame(q0, q1);
    let sin_phi = phi.sin();
    if sin_phi < SLERP_LERP_THRESHOLD {
        let raw = q0.scale(1.0 - u) + q1s.scale(u);
        let graw = normalize_backward(raw, g);
        return (graw.scale(1.0 - u), graw.scale(u * sign));
    }
    let (a, da) = slerp_weight(1.0 - u, phi, sin_phi);
    let (b, db) = slerp_weight(u, phi, sin_phi);
    // dphi/dq0 = -q1s / sin(phi), dphi/dq1s = -q0 / sin(phi); the 1/sin(phi)
    // factor is already folded into `da`, `db`.
    let s = g.dot(q0.scale(da) + q1s.scale(db));
    let g0 = g.scale(a) - q1s.scale(s);
    let g1s = g.scale(b) - q0.scale(s);
    (g0, g1s.scale(sign))
}

/// Rotation plus translation, acting as `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    pub fn from_quaternion(q: Quaternion, t: Vec3) -> Self {
        Self::new(q.to_rotation_matrix(), t)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Inverse, assuming an orthonormal rotation.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }
}

pub fn apply_rigid(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: &Vec3, q: Quaternion) -> Mat3 {
    let r = q.to_rotation_matrix();
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    r * Mat3::from_diagonal(&s2) * r.transpose()
}

/// Gradients of [`build_covariance`] w.r.t. the log-scales and the
/// quaternion, given `dL/dΣ` with every entry treated as independent.
pub fn build_covariance_backward(log_scale: &Vec3, q: Quaternion, g: &Mat3) -> (Vec3, Quaternion) {
    let r = q.to_rotation_matrix();
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    let d = Mat3::from_diagonal(&s2);
    let gs = g + g.transpose();
    let dr = gs * r * d;
    let inner = r.transpose() * g * r;
    let dls = Vec3::new(2.0 * s2.x * inner[(0, 0)], 2.0 * s2.y * inner[(1, 1)], 2.0 * s2.z * inner[(2, 2)]);
    (dls, rotation_matrix_backward(q, &dr))
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}
