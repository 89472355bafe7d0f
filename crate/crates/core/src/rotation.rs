//! Rotation helpers: intrinsic x-y-z Euler angles, the per-axis Euler error
//! metric, geodesic distance and projection onto SO(3).
//!
//! Euler triples are `[γ_x, β_y, α_z]` in degrees with
//! `R = Rx(γ) · Ry(β) · Rz(α)`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// |β| within this many degrees of 90° counts as gimbal lock.
pub const GIMBAL_MARGIN_DEG: f64 = 0.5;

/// Orthogonality tolerance used when accepting a matrix as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

pub fn euler_to_matrix(euler_deg: [f64; 3]) -> Matrix3<f64> {
    let [g, b, a] = euler_deg.map(f64::to_radians);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), g);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), a);
    (rx * ry * rz).into_inner()
}

/// Euler triple of a rotation; in gimbal lock γ is set to zero and α
/// absorbs the remaining freedom.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> [f64; 3] {
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let beta = sb.asin();
    if beta.cos() < 1e-12 {
        let alpha = r[(1, 0)].atan2(r[(1, 1)]);
        return [0.0, beta.to_degrees(), alpha.to_degrees()];
    }
    let alpha = (-r[(0, 1)]).atan2(r[(0, 0)]);
    let gamma = (-r[(1, 2)]).atan2(r[(2, 2)]);
    [gamma.to_degrees(), beta.to_degrees(), alpha.to_degrees()]
}

/// Wrap an angle in degrees to (−180, 180].
pub fn wrap_deg(angle: f64) -> f64 {
    let w = angle.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

pub fn is_gimbal_locked(euler_deg: [f64; 3]) -> bool {
    (euler_deg[1].abs() - 90.0).abs() < GIMBAL_MARGIN_DEG
}

/// Angle of `a · bᵀ` in degrees.
pub fn geodesic_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a * b.transpose();
    ((d.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationError {
    /// Euclidean norm of the wrapped per-axis Euler differences, degrees.
    /// Equals `geodesic_deg` when `gimbal_lock` is set.
    pub re_deg: f64,
    pub geodesic_deg: f64,
    /// Either Euler extraction was within the gimbal-lock margin.
    pub gimbal_lock: bool,
}

/// Per-axis Euler error of an estimate against a ground-truth triple.
pub fn rotation_error(estimate: &Matrix3<f64>, truth_euler_deg: [f64; 3]) -> Result<RotationError> {
    ensure_rotation(estimate, ROTATION_TOLERANCE)?;
    if truth_euler_deg.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("truth Euler angle"));
    }
    let truth = euler_to_matrix(truth_euler_deg);
    let geodesic = geodesic_deg(estimate, &truth);
    let est_euler = matrix_to_euler(estimate);
    let gimbal_lock = is_gimbal_locked(est_euler) || is_gimbal_locked(truth_euler_deg);
    let re_deg = if gimbal_lock {
        geodesic
    } else {
        euler_distance(est_euler, truth_euler_deg)
    };
    Ok(RotationError {
        re_deg,
        geodesic_deg: geodesic,
        gimbal_lock,
    })
}

pub(crate) fn euler_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| wrap_deg(a[i] - b[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn ensure_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rotation entry"));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    if ortho > tol {
        return Err(Error::NotARotation(format!("|RᵀR - I| = {ortho:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::NotARotation(format!("det = {det}")));
    }
    Ok(())
}

/// Nearest proper rotation in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Uniformly distributed rotation (unit quaternion from three uniforms).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    use std::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}
