//! Synthetic foot-IMU measurements and baseline gaits.
//!
//! The IMU sees the kinematic foot angular velocity rotated into its own
//! frame, delayed by the time offset and corrupted by white Gaussian noise:
//!
//! ```text
//! ω_imu(t) = Rᵀ · ω_foot(t - t_d) + n(t),   n ~ N(0, σ² I)
//! ```
//!
//! where `R` maps IMU-frame vectors into the foot frame.

use std::f64::consts::{PI, TAU};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{AngularVelocitySeries, Frame, JointTrajectory};
use crate::rotation::{ensure_rotation, euler_to_matrix, matrix_to_euler, random_rotation};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Maps IMU-frame vectors into the foot frame.
    pub rotation: Matrix3<f64>,
    /// IMU timestamp minus encoder timestamp of the same event, seconds.
    pub time_offset: f64,
}

impl GroundTruth {
    pub fn from_euler_deg(euler_deg: [f64; 3], time_offset: f64) -> Result<Self> {
        if euler_deg.iter().any(|v| !v.is_finite()) || !time_offset.is_finite() {
            return Err(Error::NonFinite("ground truth"));
        }
        Ok(Self {
            rotation: euler_to_matrix(euler_deg),
            time_offset,
        })
    }

    pub fn from_matrix(rotation: Matrix3<f64>, time_offset: f64) -> Result<Self> {
        ensure_rotation(&rotation, 1e-12)?;
        if !time_offset.is_finite() {
            return Err(Error::NonFinite("time offset"));
        }
        Ok(Self {
            rotation,
            time_offset,
        })
    }

    pub fn euler_deg(&self) -> [f64; 3] {
        matrix_to_euler(&self.rotation)
    }

    /// Uniform random rotation and an offset drawn from the grid
    /// `{j / rate : |j| <= max_steps}`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, rate: f64, max_steps: i64) -> Self {
        let rotation = random_rotation(rng);
        let steps = rng.random_range(-max_steps..=max_steps);
        Self {
            rotation,
            time_offset: steps as f64 / rate,
        }
    }
}

/// White gyroscope noise with a density in °/s/√Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub density: f64,
    pub sample_rate: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(density: f64, sample_rate: f64, seed: u64) -> Result<Self> {
        let model = Self {
            density,
            sample_rate,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density >= 0.0) || !self.density.is_finite() {
            return Err(Error::invalid("density", "must be non-negative and finite"));
        }
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(Error::invalid("sample_rate", "must be positive and finite"));
        }
        Ok(())
    }

    /// Per-sample standard deviation in rad/s.
    pub fn sigma_rad(&self) -> f64 {
        (self.density * self.sample_rate.sqrt()).to_radians()
    }
}

/// Measured IMU series for a kinematic foot series, a mounting truth and a
/// noise model. Timestamps stay on the kinematic grid.
pub fn simulate_imu(
    foot: &AngularVelocitySeries,
    truth: &GroundTruth,
    noise: &NoiseModel,
) -> Result<AngularVelocitySeries> {
    foot.expect_frame(Frame::FootKinematic)?;
    noise.validate()?;
    ensure_rotation(&truth.rotation, 1e-9)?;
    let dt = foot.uniform_interval()?;
    let series_rate = 1.0 / dt;
    if (series_rate - noise.sample_rate).abs() > 1e-6 * noise.sample_rate {
        return Err(Error::SampleRateMismatch {
            series: series_rate,
            model: noise.sample_rate,
        });
    }

    let to_imu = truth.rotation.transpose();
    let mut samples: Vec<_> = foot
        .time()
        .iter()
        .map(|&t| to_imu * foot.sample_at(t - truth.time_offset))
        .collect();

    let sigma = noise.sigma_rad();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("density", e.to_string()))?;
        for s in &mut samples {
            for v in s.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    AngularVelocitySeries::new(foot.time().to_vec(), samples, Frame::FootIMU)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaitKind {
    Walk,
    Spin,
    Wave,
}

impl GaitKind {
    pub const ALL: [GaitKind; 3] = [GaitKind::Walk, GaitKind::Spin, GaitKind::Wave];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Seconds per gait cycle.
    pub period: f64,
    /// Hip, thigh, calf amplitudes in rad.
    pub amplitudes: [f64; 3],
    pub duration: f64,
    pub sample_rate: f64,
    /// Joint angles the profile oscillates around.
    pub stance: [f64; 3],
}

pub const DEFAULT_GAIT_STANCE: [f64; 3] = [0.0, 0.8, -1.5];

impl GaitParams {
    pub fn default_for(kind: GaitKind) -> Self {
        let (period, amplitudes) = match kind {
            GaitKind::Walk => (0.5, [0.05, 0.35, 0.5]),
            GaitKind::Spin => (1.0, [0.4, 0.04, 0.02]),
            GaitKind::Wave => (1.0, [0.008, 0.4, 0.008]),
        };
        Self {
            period,
            amplitudes,
            duration: 8.0,
            sample_rate: 500.0,
            stance: DEFAULT_GAIT_STANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("period", self.period),
            ("duration", self.duration),
            ("sample_rate", self.sample_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, "must be positive and finite"));
            }
        }
        if self.amplitudes.iter().chain(&self.stance).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gait amplitude or stance"));
        }
        if self.duration * self.sample_rate < 1.0 {
            return Err(Error::invalid("duration", "shorter than two samples"));
        }
        Ok(())
    }
}

/// Angle and rate of one joint at cycle phase `phi` (radians) with cycle
/// angular frequency `w`.
type Profile = fn(amplitude: f64, phi: f64, w: f64) -> (f64, f64);

fn sine(amp: f64, phi: f64, w: f64) -> (f64, f64) {
    (amp * phi.sin(), amp * w * phi.cos())
}

fn sine_x2(amp: f64, phi: f64, w: f64) -> (f64, f64) {
    sine(amp, 2.0 * phi, 2.0 * w)
}

fn sine_x5(amp: f64, phi: f64, w: f64) -> (f64, f64) {
    sine(amp, 5.0 * phi, 5.0 * w)
}

/// Knee flexion during the swing half of the cycle: a cycloidal rise over
/// the first quarter cycle and the mirrored fall over the second, flat during
/// stance. Angle, rate and acceleration are continuous.
fn swing_lift(amp: f64, phi: f64, w: f64) -> (f64, f64) {
    if phi >= PI {
        return (0.0, 0.0);
    }
    let u = phi / PI;
    let (v, sign) = if u < 0.5 { (2.0 * u, 1.0) } else { (2.0 - 2.0 * u, -1.0) };
    let height = v - (TAU * v).sin() / TAU;
    let slope = sign * 2.0 * (1.0 - (TAU * v).cos());
    (-amp * height, -amp * slope * w / PI)
}

/// Deterministic cyclic joint profiles:
///
/// - walk: hip sway `a_h sin φ`, thigh swing `a_t sin φ`, calf lift of
///   depth `a_c` while `φ < π`.
/// - spin: hip `a_h sin φ`, thigh `a_t sin 2φ`, calf `a_c sin 2φ`.
/// - wave: thigh `a_t sin φ`, hip `a_h sin 5φ`, calf `a_c sin 5φ`.
///
/// `φ = 2π t / period`; the stance is added to every angle.
pub fn baseline_gait(kind: GaitKind, params: &GaitParams) -> Result<JointTrajectory> {
    params.validate()?;
    let profiles: [Profile; 3] = match kind {
        GaitKind::Walk => [sine, sine, swing_lift],
        GaitKind::Spin => [sine, sine_x2, sine_x2],
        GaitKind::Wave => [sine_x5, sine, sine_x5],
    };
    let rate = params.sample_rate;
    let n = (params.duration * rate + 1e-9).floor() as usize + 1;
    let w = TAU / params.period;
    // phase from the sample index keeps whole cycles bit-identical
    let per_cycle = params.period * rate;
    let cycle = per_cycle.round();
    let integral = (per_cycle - cycle).abs() < 1e-9 * per_cycle.max(1.0) && cycle >= 1.0;
    let phase = |i: usize| -> f64 {
        if integral {
            TAU * (i % cycle as usize) as f64 / cycle
        } else {
            (TAU * (i as f64 / rate) / params.period).rem_euclid(TAU)
        }
    };

    let time: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();
    let mut theta = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut dtheta = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let phi = phase(i);
        for j in 0..3 {
            let (angle, rate) = profiles[j](params.amplitudes[j], phi, w);
            theta[j][i] = params.stance[j] + angle;
            dtheta[j][i] = rate;
        }
    }
    JointTrajectory::new(time, theta, dtheta)
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::covariance::{condition_number, covariance_ff};
    use crate::kinematics::{joint_limit_report, trajectory_to_foot_velocity, Joint, LegGeometry};

    fn series(samples: Vec<Vector3<f64>>, rate: f64) -> AngularVelocitySeries {
        let t = (0..samples.len()).map(|i| i as f64 / rate).collect();
        AngularVelocitySeries::new(t, samples, Frame::FootKinematic).unwrap()
    }

    fn wavy(n: usize, rate: f64) -> AngularVelocitySeries {
        series(
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    Vector3::new((3.0 * t).sin(), (5.0 * t).cos(), 0.3 * (7.0 * t).sin())
                })
                .collect(),
            rate,
        )
    }

    #[test]
    fn identity_noiseless_is_exact_copy() {
        let foot = wavy(300, 500.0);
        let truth = GroundTruth::from_euler_deg([0.0; 3], 0.0).unwrap();
        let noise = NoiseModel::new(0.0, 500.0, 1).unwrap();
        let imu = simulate_imu(&foot, &truth, &noise).unwrap();
        assert_eq!(imu.samples(), foot.samples());
        assert_eq!(imu.frame(), Frame::FootIMU);
    }

    #[test]
    fn constant_vector_is_rotated_back() {
        let foot = series(vec![Vector3::new(1.0, 0.0, 0.0); 20], 100.0);
        let truth = GroundTruth::from_euler_deg([0.0, 0.0, 90.0], 0.0).unwrap();
        let imu = simulate_imu(&foot, &truth, &NoiseModel::new(0.0, 100.0, 0).unwrap()).unwrap();
        let expected = truth.rotation.transpose() * Vector3::new(1.0, 0.0, 0.0);
        for s in imu.samples() {
            assert!((s - expected).amax() < 1e-15);
        }
        assert!((expected - Vector3::new(0.0, -1.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn rotation_consistency_away_from_edges() {
        let foot = wavy(1000, 500.0);
        let truth = GroundTruth::from_euler_deg([20.0, -35.0, 110.0], 0.013).unwrap();
        let imu = simulate_imu(&foot, &truth, &NoiseModel::new(0.0, 500.0, 0).unwrap()).unwrap();
        for i in 20..980 {
            let back = truth.rotation * imu.samples()[i];
            let expected = foot.sample_at(foot.time()[i] - 0.013);
            assert!((back - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn noise_level_matches_density() {
        let n = 100_000;
        let foot = series(vec![Vector3::zeros(); n], 500.0);
        let truth = GroundTruth::from_euler_deg([0.0; 3], 0.0).unwrap();
        let noise = NoiseModel::new(0.06, 500.0, 42).unwrap();
        let imu = simulate_imu(&foot, &truth, &noise).unwrap();
        let expected = (0.06 * 500f64.sqrt()).to_radians();
        assert!((noise.sigma_rad() - expected).abs() < 1e-15);
        for axis in 0..3 {
            let v: Vec<f64> = imu.samples().iter().map(|s| s[axis]).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var.sqrt() / expected - 1.0).abs() < 0.05);
            let lag1 = v.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>()
                / ((n - 1) as f64 * var);
            assert!(lag1.abs() < 0.02, "lag-1 autocorrelation {lag1}");
        }
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let foot = wavy(500, 500.0);
        let truth = GroundTruth::from_euler_deg([1.0, 2.0, 3.0], 0.004).unwrap();
        let run = |seed| {
            simulate_imu(&foot, &truth, &NoiseModel::new(0.03, 500.0, seed).unwrap()).unwrap()
        };
        assert_eq!(run(9).samples(), run(9).samples());
        assert_ne!(run(9).samples(), run(10).samples());
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let foot = wavy(50, 200.0);
        let truth = GroundTruth::from_euler_deg([0.0; 3], 0.0).unwrap();
        let err = simulate_imu(&foot, &truth, &NoiseModel::new(0.0, 500.0, 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::SampleRateMismatch { .. }));
    }

    #[test]
    fn wave_moves_only_the_thigh() {
        let params = GaitParams::default_for(GaitKind::Wave);
        assert_eq!(params.amplitudes[1], 0.4);
        let traj = baseline_gait(GaitKind::Wave, &params).unwrap();
        let report = joint_limit_report(&traj, &LegGeometry::default());
        assert!(report[Joint::Hip.index()].range < 0.02);
        assert!(report[Joint::Calf.index()].range < 0.02);
        assert!((report[Joint::Thigh.index()].range - 0.8).abs() < 1e-4);
    }

    #[test]
    fn gaits_repeat_exactly_over_two_cycles() {
        for kind in GaitKind::ALL {
            let mut params = GaitParams::default_for(kind);
            params.duration = 2.0 * params.period;
            let traj = baseline_gait(kind, &params).unwrap();
            let cycle = (params.period * params.sample_rate).round() as usize;
            assert_eq!(traj.len(), 2 * cycle + 1);
            for j in Joint::ALL {
                for i in 0..=cycle {
                    assert_eq!(traj.theta(j)[i], traj.theta(j)[i + cycle]);
                    assert_eq!(traj.dtheta(j)[i], traj.dtheta(j)[i + cycle]);
                }
            }
        }
    }

    #[test]
    fn walk_rates_match_angles() {
        let params = GaitParams::default_for(GaitKind::Walk);
        let traj = baseline_gait(GaitKind::Walk, &params).unwrap();
        let dt = traj.sample_interval();
        // central-difference error is at most dt²/6 · max|θ'''|; the calf
        // lift has the largest third derivative
        let lift_rate = 2.0 * std::f64::consts::TAU / params.period / PI;
        let tol = dt * dt / 6.0 * params.amplitudes[2] * TAU * TAU * lift_rate.powi(3) * 1.01;
        for j in Joint::ALL {
            let th = traj.theta(j);
            let d = traj.dtheta(j);
            for i in 1..traj.len() - 1 {
                let fd = (th[i + 1] - th[i - 1]) / (2.0 * dt);
                assert!((fd - d[i]).abs() < tol, "{j:?} at {i}: {fd} vs {}", d[i]);
            }
        }
    }

    #[test]
    fn walk_is_poorly_conditioned() {
        let params = GaitParams::default_for(GaitKind::Walk);
        let traj = baseline_gait(GaitKind::Walk, &params).unwrap();
        let foot = trajectory_to_foot_velocity(&LegGeometry::default(), &traj).unwrap();
        let n = (params.duration * params.sample_rate).round() as usize;
        let kappa = condition_number(&covariance_ff(&foot.slice(0, n)).unwrap()).unwrap();
        assert!(kappa > 50.0, "walk kappa {kappa}");
    }

    #[test]
    fn gait_params_validation() {
        let mut p = GaitParams::default_for(GaitKind::Spin);
        p.period = 0.0;
        assert!(baseline_gait(GaitKind::Spin, &p).is_err());
        let mut p = GaitParams::default_for(GaitKind::Spin);
        p.sample_rate = -1.0;
        assert!(baseline_gait(GaitKind::Spin, &p).is_err());
    }
}
