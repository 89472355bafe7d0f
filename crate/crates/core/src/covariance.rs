//! Sample auto- and cross-covariances of angular-velocity streams and the
//! conditioning measures built on them.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{AngularVelocitySeries, Frame, GRID_TOLERANCE};

/// Below this ratio of smallest to largest singular value `condition_number`
/// reports an infinite condition number.
pub const SINGULAR_SENTINEL_RATIO: f64 = 1e-15;

/// Relative singular-value floor for inverting an auto-covariance.
pub const INVERSION_FLOOR: f64 = 1e-12;

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// The four covariance blocks of a shifted IMU stream `I` and a kinematic
/// foot stream `F`, all normalised by `1/(N-1)` around the sample means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSet {
    pub sigma_ii: Matrix3<f64>,
    pub sigma_ff: Matrix3<f64>,
    /// `E[(I - Ī)(F - F̄)ᵀ]`
    pub sigma_if: Matrix3<f64>,
    /// Always exactly `sigma_ifᵀ`.
    pub sigma_fi: Matrix3<f64>,
    pub mean_i: Vector3<f64>,
    pub mean_f: Vector3<f64>,
}

pub(crate) fn mean(samples: &[Vector3<f64>]) -> Vector3<f64> {
    let sum = samples.iter().fold(Vector3::zeros(), |acc, s| acc + s);
    sum / samples.len() as f64
}

/// `1/(N-1) Σ (a - ā)(b - b̄)ᵀ`
pub(crate) fn cross_covariance(
    a: &[Vector3<f64>],
    mean_a: &Vector3<f64>,
    b: &[Vector3<f64>],
    mean_b: &Vector3<f64>,
) -> Matrix3<f64> {
    let mut acc = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        acc += dx * dy.transpose();
    }
    acc / (a.len() - 1) as f64
}

/// Auto-covariance of raw samples (no frame or grid checks).
pub(crate) fn auto_covariance(samples: &[Vector3<f64>]) -> Matrix3<f64> {
    let m = mean(samples);
    let mut acc = Matrix3::zeros();
    for s in samples {
        let d = s - m;
        acc += d * d.transpose();
    }
    acc / (samples.len() - 1) as f64
}

/// Auto-covariance `Σ_FF` of a kinematic foot series.
pub fn covariance_ff(series: &AngularVelocitySeries) -> Result<Matrix3<f64>> {
    series.expect_frame(Frame::FootKinematic)?;
    if series.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: series.len(),
        });
    }
    Ok(auto_covariance(series.samples()))
}

/// All four covariance blocks for an (already shifted) IMU series and a
/// kinematic foot series sampled on the same grid.
pub fn covariance_set(
    imu_shifted: &AngularVelocitySeries,
    foot: &AngularVelocitySeries,
) -> Result<CovarianceSet> {
    imu_shifted.expect_frame(Frame::FootIMU)?;
    foot.expect_frame(Frame::FootKinematic)?;
    if imu_shifted.len() != foot.len() {
        return Err(Error::LengthMismatch {
            left: imu_shifted.len(),
            right: foot.len(),
        });
    }
    if foot.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: foot.len(),
        });
    }
    check_aligned(imu_shifted.time(), foot.time())?;

    let (i, f) = (imu_shifted.samples(), foot.samples());
    let mean_i = mean(i);
    let mean_f = mean(f);
    let sigma_if = cross_covariance(i, &mean_i, f, &mean_f);
    Ok(CovarianceSet {
        sigma_ii: auto_covariance(i),
        sigma_ff: auto_covariance(f),
        sigma_fi: sigma_if.transpose(),
        sigma_if,
        mean_i,
        mean_f,
    })
}

fn check_aligned(a: &[f64], b: &[f64]) -> Result<()> {
    let scale = if a.len() > 1 {
        (a[a.len() - 1] - a[0]).abs() / (a.len() - 1) as f64
    } else {
        1.0
    };
    let tol = GRID_TOLERANCE * scale.max(1e-300) * 1e3;
    if a.iter().zip(b).any(|(x, y)| (x - y).abs() > tol) {
        return Err(Error::MisalignedGrids);
    }
    Ok(())
}

fn ensure_symmetric(m: &Matrix3<f64>) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE * m.amax().max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    Ok(())
}

/// Ratio of the largest to the smallest singular value of a symmetric PSD
/// matrix; `f64::INFINITY` when the smallest is negligible.
pub fn condition_number(m: &Matrix3<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry"));
    }
    ensure_symmetric(m)?;
    let sv = m.singular_values();
    let (largest, smallest) = (sv.max(), sv.min());
    if largest == 0.0 || smallest < SINGULAR_SENTINEL_RATIO * largest {
        return Ok(f64::INFINITY);
    }
    Ok(largest / smallest)
}

/// Inverse of an auto-covariance, refusing (not regularising) anything whose
/// singular values fall below [`INVERSION_FLOOR`] relative to the largest.
pub(crate) fn guarded_inverse(m: &Matrix3<f64>, what: &'static str) -> Result<Matrix3<f64>> {
    let sv = m.singular_values();
    let (largest, smallest) = (sv.max(), sv.min());
    if !(largest > 0.0) || smallest < INVERSION_FLOOR * largest {
        return Err(Error::IllConditioned {
            what,
            smallest,
            largest,
        });
    }
    m.try_inverse().ok_or(Error::IllConditioned {
        what,
        smallest,
        largest,
    })
}
