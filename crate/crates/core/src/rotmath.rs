//! Rotation arithmetic and conversions between unit quaternions, rotation
//! matrices, axis-angle tangent vectors and Modified Rodrigues Parameters.
//!
//! Quaternions are written `[rho, nu]` with `rho` the real part and `nu` the
//! imaginary 3-vector. The MRP map is the stereographic projection of the
//! quaternion 3-sphere from its south pole `[-1, 0, 0, 0]` onto R³:
//!
//! ```text
//! psi = nu / (1 + rho)
//! [rho, nu] = [(1 - |psi|²) / (1 + |psi|²), 2 psi / (1 + |psi|²)]
//! ```
//!
//! `q` and `-q` are the same rotation but project to different MRP points with
//! reciprocal norms, so every caller that projects has to pick an antipode.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::RotError;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle `exp_so3` and `log_so3` switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `mrp_project` refuses quaternions with `rho <= -1 + SOUTH_POLE_TOL`.
pub const SOUTH_POLE_TOL: f64 = 1e-9;

/// Inside `(PI - NEAR_PI, PI]` the logarithm recovers the axis from the
/// symmetric part of the matrix instead of the vanishing skew part.
const NEAR_PI: f64 = 1e-3;

/// A unit quaternion `[rho, nu]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    pub rho: f64,
    pub nu: Vec3,
}

impl UnitQuaternion {
    /// Builds a quaternion and normalizes it. Panics on a zero or non-finite
    /// input since there is no rotation to recover.
    pub fn new(rho: f64, nu: Vec3) -> Self {
        let norm = (rho * rho + nu.norm_squared()).sqrt();
        assert!(
            norm.is_finite() && norm > 0.0,
            "cannot normalize quaternion [{rho}, {nu:?}]"
        );
        Self {
            rho: rho / norm,
            nu: nu / norm,
        }
    }

    /// Wraps components that are already unit length without touching them.
    pub const fn new_unchecked(rho: f64, nu: Vec3) -> Self {
        Self { rho, nu }
    }

    pub fn identity() -> Self {
        Self::new_unchecked(1.0, Vec3::zeros())
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, axis.normalize() * s)
    }

    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::new(w, Vec3::new(x, y, z))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.rho, self.nu.x, self.nu.y, self.nu.z]
    }

    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.rho, self.nu.x, self.nu.y, self.nu.z)
    }

    /// Normalizes an arbitrary non-zero 4-vector `[w, x, y, z]`.
    pub fn from_vector4(v: &Vector4<f64>) -> Self {
        Self::new(v[0], Vec3::new(v[1], v[2], v[3]))
    }

    pub fn norm(&self) -> f64 {
        (self.rho * self.rho + self.nu.norm_squared()).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.rho * other.rho + self.nu.dot(&other.nu)
    }

    pub fn conjugate(&self) -> Self {
        quat_conjugate(self)
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        quat_to_matrix(self)
    }

    /// Rotation angle in `[0, PI]`, insensitive to the sign of the quaternion.
    pub fn angle(&self) -> f64 {
        2.0 * self.nu.norm().atan2(self.rho.abs())
    }
}

impl Neg for UnitQuaternion {
    type Output = Self;

    fn neg(self) -> Self {
        Self::new_unchecked(-self.rho, -self.nu)
    }
}

impl Mul for UnitQuaternion {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        quat_mul(&self, &rhs)
    }
}

impl fmt::Display for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.rho, self.nu.x, self.nu.y, self.nu.z
        )
    }
}

/// An element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub Mat3);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn to_quat(&self) -> UnitQuaternion {
        matrix_to_quat(self)
    }

    /// Largest entry of `|mᵀm - I|` together with `|det(m) - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.transpose() * self.0 - Mat3::identity();
        gram.abs().max().max((self.0.determinant() - 1.0).abs())
    }
}

impl Mul for RotationMatrix {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

impl Mul<&RotationMatrix> for &RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// Axis-angle vector: direction is the axis, norm the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector(pub Vec3);

impl TangentVector {
    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Modified Rodrigues Parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrpVector(pub Vec3);

impl MrpVector {
    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

/// Hamilton product `a ⊗ b`, renormalized.
pub fn quat_mul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    let rho = a.rho * b.rho - a.nu.dot(&b.nu);
    let nu = b.nu * a.rho + a.nu * b.rho + a.nu.cross(&b.nu);
    UnitQuaternion::new(rho, nu)
}

pub fn quat_conjugate(q: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::new_unchecked(q.rho, -q.nu)
}

pub fn quat_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    let (w, x, y, z) = (q.rho, q.nu.x, q.nu.y, q.nu.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    RotationMatrix(Mat3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    ))
}

/// Quaternion of a rotation matrix, returned with `rho >= 0`.
pub fn matrix_to_quat(r: &RotationMatrix) -> UnitQuaternion {
    let m = &r.0;
    let trace = m.trace();
    let (w, x, y, z);
    if trace > 0.0 {
        let s = 2.0 * (trace + 1.0).sqrt();
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    let q = UnitQuaternion::from_wxyz(w, x, y, z);
    if q.rho < 0.0 {
        -q
    } else {
        q
    }
}

fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee_skew(m: &Mat3) -> Vec3 {
    // vee((m - mᵀ) / 2)
    0.5 * Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Rotation angle of `m` in `[0, PI]` from the stable `atan2` form.
fn rotation_angle(m: &Mat3) -> f64 {
    let cos = (0.5 * (m.trace().clamp(-1.0, 3.0) - 1.0)).clamp(-1.0, 1.0);
    let sin = vee_skew(m).norm();
    sin.atan2(cos)
}

/// Exponential map from the tangent space to SO(3) (Rodrigues formula).
pub fn exp_so3(v: &TangentVector) -> RotationMatrix {
    let theta = v.0.norm();
    let k = hat(&v.0);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return RotationMatrix(Mat3::identity() + k + 0.5 * k2);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    RotationMatrix(Mat3::identity() + a * k + b * k2)
}

/// Principal logarithm of SO(3); the result has norm in `[0, PI]`.
pub fn log_so3(r: &RotationMatrix) -> TangentVector {
    let m = &r.0;
    let theta = rotation_angle(m);
    let skew = vee_skew(m);
    if theta < SMALL_ANGLE {
        return TangentVector(skew);
    }
    if theta > PI - NEAR_PI {
        // Symmetric part is cos(θ)·I + (1 - cos θ)·a aᵀ.
        let cos = theta.cos();
        let sym = 0.5 * (m + m.transpose());
        let outer = (sym - Mat3::identity() * cos) / (1.0 - cos);
        let col = (0..3)
            .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
            .unwrap_or(0);
        let mut axis = outer.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return TangentVector(axis * theta);
    }
    TangentVector(skew * (theta / theta.sin()))
}

/// Geodesic (angular) distance `|log(aᵀb)|` in radians.
pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    rotation_angle(&(a.0.transpose() * b.0))
}

/// Angle in `[0, PI]` of the rotation taking `a` to `b`, insensitive to the
/// signs of either quaternion.
pub fn quat_geodesic_distance(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let rho = a.rho * b.rho + a.nu.dot(&b.nu);
    let nu = b.nu * a.rho - a.nu * b.rho - a.nu.cross(&b.nu);
    2.0 * nu.norm().atan2(rho.abs())
}

/// Stereographic projection `psi = nu / (1 + rho)`.
///
/// For `rho < 0` the denominator is evaluated as `|nu|² / (1 - rho)` to avoid
/// cancellation near the south pole.
pub fn mrp_project(q: &UnitQuaternion) -> Result<MrpVector, RotError> {
    if q.rho <= -1.0 + SOUTH_POLE_TOL {
        return Err(RotError::SouthPoleSingularity { rho: q.rho });
    }
    if q.rho >= 0.0 {
        Ok(MrpVector(q.nu / (1.0 + q.rho)))
    } else {
        Ok(MrpVector(q.nu * ((1.0 - q.rho) / q.nu.norm_squared())))
    }
}

/// Inverse stereographic projection back onto the unit sphere.
pub fn mrp_unproject(psi: &MrpVector) -> UnitQuaternion {
    let s = psi.0.norm_squared();
    let denom = 1.0 + s;
    UnitQuaternion::new((1.0 - s) / denom, psi.0 * (2.0 / denom))
}

/// Haar-uniform rotation: a normalized 4D standard Gaussian.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    loop {
        let v = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() > 1e-12 {
            return UnitQuaternion::from_vector4(&v);
        }
    }
}

/// Closest rotation to `m` in the Frobenius norm, `U·diag(1, 1, det(UVᵀ))·Vᵀ`.
///
/// Returns `None` when the two largest singular values do not pin down a
/// unique answer (rank below two, relative to `rank_tol`).
pub fn project_to_so3(m: &Mat3, rank_tol: f64) -> Option<RotationMatrix> {
    if !m.iter().all(|x| x.is_finite()) {
        return None;
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[0]] <= 0.0 || sv[order[1]] <= rank_tol * sv[order[0]] {
        return None;
    }
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    Some(RotationMatrix(u * d * v_t))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn quat() -> impl Strategy<Value = UnitQuaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("away from zero", |c| {
                c.iter().map(|x| x * x).sum::<f64>() > 1e-2
            })
            .prop_map(|c| UnitQuaternion::from_wxyz(c[0], c[1], c[2], c[3]))
    }

    fn rotation() -> impl Strategy<Value = RotationMatrix> {
        quat().prop_map(|q| q.to_matrix())
    }

    proptest! {
        #[test]
        fn mrp_round_trip_on_northern_hemisphere(q in quat()) {
            let q = if q.rho < 0.0 { -q } else { q };
            let back = mrp_unproject(&mrp_project(&q).unwrap());
            prop_assert!((back.as_vector4() - q.as_vector4()).norm() < 1e-10);
        }

        #[test]
        fn antipode_norms_are_reciprocal(q in quat()) {
            let a = mrp_project(&q).unwrap().norm();
            let b = mrp_project(&-q).unwrap().norm();
            prop_assert!((a * b - 1.0).abs() < 1e-9);
        }

        #[test]
        fn antipodes_lie_on_opposite_rays(q in quat()) {
            let a = mrp_project(&q).unwrap().0;
            let b = mrp_project(&-q).unwrap().0;
            prop_assert!(a.cross(&b).norm() < 1e-9 * (1.0 + a.norm() * b.norm()));
            prop_assert!(a.dot(&b) <= 0.0);
        }

        #[test]
        fn quaternion_and_matrix_products_agree(a in quat(), b in quat()) {
            let lhs = (a * b).to_matrix();
            let rhs = a.to_matrix() * b.to_matrix();
            prop_assert!((lhs.0 - rhs.0).norm() < 1e-12);
        }

        #[test]
        fn log_inverts_exp_below_pi(q in quat()) {
            let r = q.to_matrix();
            let back = exp_so3(&log_so3(&r));
            prop_assert!((back.0 - r.0).norm() < 1e-9);
        }

        #[test]
        fn geodesic_distance_is_a_metric(a in rotation(), b in rotation(), c in rotation()) {
            let ab = geodesic_distance(&a, &b);
            let bc = geodesic_distance(&b, &c);
            let ac = geodesic_distance(&a, &c);
            prop_assert!((0.0..=PI + 1e-12).contains(&ab));
            prop_assert!((ab - geodesic_distance(&b, &a)).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(geodesic_distance(&a, &a) < 1e-7);
        }

        #[test]
        fn projection_to_so3_is_idempotent(r in rotation()) {
            let p = project_to_so3(&r.0, 1e-9).unwrap();
            prop_assert!((p.0 - r.0).norm() < 1e-12);
            prop_assert!(p.orthonormality_error() < 1e-12);
        }
    }
}
