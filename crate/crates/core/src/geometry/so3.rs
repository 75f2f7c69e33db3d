//! SO(3) exponential/logarithm and their Jacobians, used by the
//! registration Jacobians.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

const SMALL_ANGLE: f64 = 1e-5;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*omega)
}

/// Rotation vector with angle in [0, π].
pub fn log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut q = *q.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let v = q.vector();
    let s = v.norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

/// Left Jacobian: `exp(φ + δ) ≈ exp(J_l(φ) δ) exp(φ)`.
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k * 0.5 + k2 * (1.0 / 6.0);
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + k2 * ((theta - theta.sin()) / (t2 * theta))
}

pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k2 * (1.0 / 12.0);
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - k * 0.5 + k2 * coeff
}

/// Right Jacobian: `exp(φ + δ) ≈ exp(φ) exp(J_r(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian(&(-phi))
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian_inv(&(-phi))
}
