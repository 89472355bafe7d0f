//! Three-joint leg model and the foot-end angular velocity it produces.
//!
//! The leg follows modified Denavit-Hartenberg conventions with link twists
//! `hip = calf = foot = 0` and `thigh = -90°`. For that twist assignment, and
//! with the floating base held still, the foot-end angular velocity depends
//! only on the hip rate and on the summed thigh and calf motion:
//!
//! ```text
//! wx = -dθ_hip · sin(θ_thigh + θ_calf)
//! wy = -dθ_hip · cos(θ_thigh + θ_calf)
//! wz =  dθ_thigh + dθ_calf
//! ```
//!
//! Angles are kept unwrapped everywhere so joint ranges stay meaningful.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for comparing twist angles against the supported assignment.
const TWIST_TOLERANCE: f64 = 1e-12;

/// Relative tolerance on the spacing of a uniform time grid.
pub(crate) const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Joint {
    Hip,
    Thigh,
    Calf,
}

impl Joint {
    pub const ALL: [Joint; 3] = [Joint::Hip, Joint::Thigh, Joint::Calf];

    pub fn index(self) -> usize {
        match self {
            Joint::Hip => 0,
            Joint::Thigh => 1,
            Joint::Calf => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::Hip => "hip",
            Joint::Thigh => "thigh",
            Joint::Calf => "calf",
        }
    }
}

/// Closed joint position interval in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

impl JointLimits {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let limits = Self { lower, upper };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::NonFinite("joint limit"));
        }
        if self.lower >= self.upper {
            return Err(Error::invalid(
                "limits",
                format!("lower bound {} is not below upper bound {}", self.lower, self.upper),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.lower && angle <= self.upper
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Link twists and joint limits of one leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegGeometry {
    pub twist_hip: f64,
    pub twist_thigh: f64,
    pub twist_calf: f64,
    pub twist_foot: f64,
    /// Indexed by [`Joint::index`].
    pub limits: [JointLimits; 3],
}

impl Default for LegGeometry {
    /// Go2-class leg. The limits are configuration defaults.
    fn default() -> Self {
        Self {
            twist_hip: 0.0,
            twist_thigh: -FRAC_PI_2,
            twist_calf: 0.0,
            twist_foot: 0.0,
            limits: [
                JointLimits { lower: -0.84, upper: 0.84 },
                JointLimits { lower: -1.5, upper: 3.4 },
                JointLimits { lower: -2.7, upper: -0.8 },
            ],
        }
    }
}

impl LegGeometry {
    pub fn with_limits(limits: [JointLimits; 3]) -> Result<Self> {
        let geometry = Self {
            limits,
            ..Self::default()
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn limits(&self, joint: Joint) -> JointLimits {
        self.limits[joint.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for twist in [self.twist_hip, self.twist_thigh, self.twist_calf, self.twist_foot] {
            if !twist.is_finite() {
                return Err(Error::NonFinite("twist angle"));
            }
        }
        self.limits.iter().try_for_each(JointLimits::validate)
    }

    /// The closed-form foot velocity is only derived for the default twist
    /// assignment; anything else is refused instead of answered wrongly.
    pub fn ensure_supported(&self) -> Result<()> {
        self.validate()?;
        let reference = Self::default();
        let twists = [
            ("hip", self.twist_hip, reference.twist_hip),
            ("thigh", self.twist_thigh, reference.twist_thigh),
            ("calf", self.twist_calf, reference.twist_calf),
            ("foot", self.twist_foot, reference.twist_foot),
        ];
        for (name, got, want) in twists {
            if (got - want).abs() > TWIST_TOLERANCE {
                return Err(Error::UnsupportedGeometry(format!(
                    "{name} twist is {got} rad, the foot velocity model needs {want} rad"
                )));
            }
        }
        Ok(())
    }
}

/// Time-gridded joint angles and rates for hip, thigh and calf.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    time: Vec<f64>,
    theta: [Vec<f64>; 3],
    dtheta: [Vec<f64>; 3],
}

impl JointTrajectory {
    pub fn new(time: Vec<f64>, theta: [Vec<f64>; 3], dtheta: [Vec<f64>; 3]) -> Result<Self> {
        let n = time.len();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        for seq in theta.iter().chain(dtheta.iter()) {
            if seq.len() != n {
                return Err(Error::LengthMismatch {
                    left: n,
                    right: seq.len(),
                });
            }
            if seq.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("joint trajectory sample"));
            }
        }
        check_uniform_grid(&time)?;
        Ok(Self {
            time,
            theta,
            dtheta,
        })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn theta(&self, joint: Joint) -> &[f64] {
        &self.theta[joint.index()]
    }

    pub fn dtheta(&self, joint: Joint) -> &[f64] {
        &self.dtheta[joint.index()]
    }

    pub fn sample_interval(&self) -> f64 {
        grid_interval(&self.time)
    }

    /// Copy with every joint rate replaced by `f(joint, index, rate)`.
    pub fn map_rates(&self, mut f: impl FnMut(Joint, usize, f64) -> f64) -> Result<Self> {
        let mut dtheta = self.dtheta.clone();
        for joint in Joint::ALL {
            for (i, rate) in dtheta[joint.index()].iter_mut().enumerate() {
                *rate = f(joint, i, *rate);
            }
        }
        Self::new(self.time.clone(), self.theta.clone(), dtheta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    /// Foot-end angular velocity predicted from the joint encoders.
    FootKinematic,
    /// Angular velocity as measured by the foot-mounted IMU.
    FootIMU,
}

impl Frame {
    pub fn as_str(self) -> &'static str {
        match self {
            Frame::FootKinematic => "FootKinematic",
            Frame::FootIMU => "FootIMU",
        }
    }
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FootKinematic" => Ok(Frame::FootKinematic),
            "FootIMU" => Ok(Frame::FootIMU),
            other => Err(Error::Parse {
                what: "frame tag",
                reason: format!("unknown frame `{other}`"),
            }),
        }
    }
}

/// Timestamped angular-velocity samples in rad/s, tagged with their frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularVelocitySeries {
    time: Vec<f64>,
    samples: Vec<Vector3<f64>>,
    frame: Frame,
}

impl AngularVelocitySeries {
    pub fn new(time: Vec<f64>, samples: Vec<Vector3<f64>>, frame: Frame) -> Result<Self> {
        if time.len() != samples.len() {
            return Err(Error::LengthMismatch {
                left: time.len(),
                right: samples.len(),
            });
        }
        if time.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("series timestamp"));
        }
        if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("angular velocity sample"));
        }
        Ok(Self {
            time,
            samples,
            frame,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn samples(&self) -> &[Vector3<f64>] {
        &self.samples
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn expect_frame(&self, expected: Frame) -> Result<()> {
        if self.frame != expected {
            return Err(Error::FrameMismatch {
                expected,
                got: self.frame,
            });
        }
        Ok(())
    }

    /// Sample interval of a uniform grid; errors when the grid is not uniform.
    pub fn uniform_interval(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: self.len(),
            });
        }
        check_uniform_grid(&self.time)?;
        Ok(grid_interval(&self.time))
    }

    /// Linear interpolation at time `t`, holding the first/last sample
    /// outside the recorded span. Assumes a uniform grid.
    pub fn sample_at(&self, t: f64) -> Vector3<f64> {
        let n = self.samples.len();
        let dt = grid_interval(&self.time);
        let mut pos = (t - self.time[0]) / dt;
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            pos = nearest;
        }
        if pos <= 0.0 {
            return self.samples[0];
        }
        if pos >= (n - 1) as f64 {
            return self.samples[n - 1];
        }
        let i = pos.floor() as usize;
        let w = pos - i as f64;
        if w == 0.0 {
            return self.samples[i];
        }
        self.samples[i] * (1.0 - w) + self.samples[i + 1] * w
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            time: self.time[start..end].to_vec(),
            samples: self.samples[start..end].to_vec(),
            frame: self.frame,
        }
    }

    pub(crate) fn with_samples(&self, samples: Vec<Vector3<f64>>, frame: Frame) -> Self {
        debug_assert_eq!(samples.len(), self.time.len());
        Self {
            time: self.time.clone(),
            samples,
            frame,
        }
    }
}

fn grid_interval(time: &[f64]) -> f64 {
    (time[time.len() - 1] - time[0]) / (time.len() - 1) as f64
}

pub(crate) fn check_uniform_grid(time: &[f64]) -> Result<()> {
    if time.len() < 2 {
        return Ok(());
    }
    let dt = grid_interval(time);
    if !(dt > 0.0) {
        return Err(Error::InvalidTrajectory(
            "time grid must be strictly increasing".into(),
        ));
    }
    for (i, pair) in time.windows(2).enumerate() {
        let step = pair[1] - pair[0];
        if (step - dt).abs() > GRID_TOLERANCE * dt.max(1.0) {
            return Err(Error::InvalidTrajectory(format!(
                "time grid is not uniform at sample {i}: step {step} vs mean {dt}"
            )));
        }
    }
    Ok(())
}

/// Foot-end angular velocity for one joint state.
pub fn foot_angular_velocity(
    geometry: &LegGeometry,
    theta_thigh_plus_calf: f64,
    dtheta_hip: f64,
    dtheta_thigh_plus_calf: f64,
) -> Result<Vector3<f64>> {
    geometry.ensure_supported()?;
    if !(theta_thigh_plus_calf.is_finite()
        && dtheta_hip.is_finite()
        && dtheta_thigh_plus_calf.is_finite())
    {
        return Err(Error::NonFinite("joint state"));
    }
    Ok(foot_velocity_unchecked(
        theta_thigh_plus_calf,
        dtheta_hip,
        dtheta_thigh_plus_calf,
    ))
}

#[inline]
pub(crate) fn foot_velocity_unchecked(sum: f64, dtheta_hip: f64, dsum: f64) -> Vector3<f64> {
    let (s, c) = sum.sin_cos();
    Vector3::new(-dtheta_hip * s, -dtheta_hip * c, dsum)
}

/// Foot-end angular velocity for every sample of a joint trajectory.
pub fn trajectory_to_foot_velocity(
    geometry: &LegGeometry,
    traj: &JointTrajectory,
) -> Result<AngularVelocitySeries> {
    geometry.ensure_supported()?;
    let th = traj.theta(Joint::Thigh);
    let ca = traj.theta(Joint::Calf);
    let dh = traj.dtheta(Joint::Hip);
    let dth = traj.dtheta(Joint::Thigh);
    let dca = traj.dtheta(Joint::Calf);
    let samples = (0..traj.len())
        .map(|n| foot_velocity_unchecked(th[n] + ca[n], dh[n], dth[n] + dca[n]))
        .collect();
    AngularVelocitySeries::new(traj.time().to_vec(), samples, Frame::FootKinematic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointRange {
    pub joint: Joint,
    pub min: f64,
    pub max: f64,
    /// `max - min` over the trajectory.
    pub range: f64,
    pub in_bounds: bool,
}

/// Motion range of each joint and whether it stays inside its limits.
pub fn joint_limit_report(traj: &JointTrajectory, geometry: &LegGeometry) -> [JointRange; 3] {
    Joint::ALL.map(|joint| {
        let limits = geometry.limits(joint);
        let angles = traj.theta(joint);
        let (min, max) = angles
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
                (lo.min(a), hi.max(a))
            });
        JointRange {
            joint,
            min,
            max,
            range: max - min,
            in_bounds: limits.contains(min) && limits.contains(max),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * dt).collect()
    }

    fn constant_traj(n: usize, angles: [f64; 3]) -> JointTrajectory {
        JointTrajectory::new(
            grid(n, 0.002),
            angles.map(|a| vec![a; n]),
            [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        )
        .unwrap()
    }

    #[test]
    fn foot_velocity_closed_form_cases() {
        let g = LegGeometry::default();
        let w = foot_angular_velocity(&g, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(w, Vector3::new(-0.0, -1.0, 0.0));
        let w = foot_angular_velocity(&g, FRAC_PI_2, 1.0, 0.0).unwrap();
        assert!((w - Vector3::new(-1.0, 0.0, 0.0)).amax() < 1e-15);
        let w = foot_angular_velocity(&g, 0.7, 0.0, 0.0).unwrap();
        assert_eq!(w.amax(), 0.0);
    }

    #[test]
    fn foot_velocity_rejects_non_finite() {
        let g = LegGeometry::default();
        assert!(matches!(
            foot_angular_velocity(&g, f64::NAN, 1.0, 0.0),
            Err(Error::NonFinite(_))
        ));
        assert!(foot_angular_velocity(&g, 0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn non_default_twist_is_unsupported() {
        let g = LegGeometry {
            twist_calf: 0.1,
            ..LegGeometry::default()
        };
        assert!(matches!(
            foot_angular_velocity(&g, 0.0, 1.0, 0.0),
            Err(Error::UnsupportedGeometry(_))
        ));
    }

    #[test]
    fn limits_must_be_ordered() {
        assert!(JointLimits::new(1.0, 1.0).is_err());
        assert!(JointLimits::new(1.0, -1.0).is_err());
        assert!(JointLimits::new(-1.0, 1.0).is_ok());
    }

    #[test]
    fn zero_trajectory_gives_zero_velocity() {
        let traj = constant_traj(100, [0.0; 3]);
        let series = trajectory_to_foot_velocity(&LegGeometry::default(), &traj).unwrap();
        assert_eq!(series.len(), 100);
        assert_eq!(series.frame(), Frame::FootKinematic);
        assert!(series.samples().iter().all(|s| s.amax() == 0.0));
    }

    #[test]
    fn trajectory_matches_scalar_model_per_sample() {
        // per-sample oracle: the scalar operation on each state
        let n = 10;
        let theta: [Vec<f64>; 3] =
            [0, 1, 2].map(|j| (0..n).map(|i| ((i * 7 + j * 3) as f64 * 0.37).sin()).collect());
        let dtheta: [Vec<f64>; 3] =
            [0, 1, 2].map(|j| (0..n).map(|i| ((i * 5 + j * 11) as f64 * 0.53).cos() * 2.0).collect());
        let traj = JointTrajectory::new(grid(n, 0.01), theta.clone(), dtheta.clone()).unwrap();
        let g = LegGeometry::default();
        let series = trajectory_to_foot_velocity(&g, &traj).unwrap();
        for i in 0..n {
            let expect = foot_angular_velocity(
                &g,
                theta[1][i] + theta[2][i],
                dtheta[0][i],
                dtheta[1][i] + dtheta[2][i],
            )
            .unwrap();
            assert_eq!(series.samples()[i], expect);
        }
    }

    #[test]
    fn horizontal_components_carry_hip_rate() {
        let g = LegGeometry::default();
        for k in 0..50 {
            let sum = -3.0 + 0.13 * k as f64;
            let rate = 0.4 * k as f64 - 7.0;
            let w = foot_angular_velocity(&g, sum, rate, 1.0).unwrap();
            let lhs = w.x * w.x + w.y * w.y;
            let rhs = rate * rate;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }
    }

    #[test]
    fn joint_report_constant_mid_range() {
        let g = LegGeometry::default();
        let mids = Joint::ALL.map(|j| g.limits(j).midpoint());
        let report = joint_limit_report(&constant_traj(20, mids), &g);
        for r in report {
            assert_eq!(r.range, 0.0);
            assert!(r.in_bounds);
        }
    }

    #[test]
    fn joint_report_flags_single_violation() {
        let g = LegGeometry::default();
        let mids = Joint::ALL.map(|j| g.limits(j).midpoint());
        let traj = constant_traj(20, mids);
        let mut theta = [0, 1, 2].map(|j| traj.theta(Joint::ALL[j]).to_vec());
        theta[1][7] = g.limits(Joint::Thigh).upper + 0.1;
        let dtheta = [0, 1, 2].map(|j| traj.dtheta(Joint::ALL[j]).to_vec());
        let traj = JointTrajectory::new(traj.time().to_vec(), theta, dtheta).unwrap();
        let report = joint_limit_report(&traj, &g);
        assert!(report[0].in_bounds);
        assert!(!report[1].in_bounds);
        assert!(report[2].in_bounds);
    }

    #[test]
    fn joint_report_sinusoid_range() {
        // 0.5 rad amplitude sampled so that both extrema land on the grid
        let g = LegGeometry::default();
        let n = 401;
        let t = grid(n, 0.005);
        let mid = g.limits(Joint::Thigh).midpoint();
        let thigh: Vec<f64> = t.iter().map(|&t| mid + 0.5 * (2.0 * PI * t / 2.0).sin()).collect();
        let theta = [vec![0.0; n], thigh, vec![-1.75; n]];
        let traj = JointTrajectory::new(t, theta, [vec![0.0; n], vec![0.0; n], vec![0.0; n]]).unwrap();
        let report = joint_limit_report(&traj, &g);
        assert!((report[1].range - 1.0).abs() < 1e-9);
        assert!(report[1].in_bounds);
    }

    #[test]
    fn trajectory_validation() {
        assert!(matches!(
            JointTrajectory::new(vec![0.0], [vec![0.0], vec![0.0], vec![0.0]], [vec![0.0], vec![0.0], vec![0.0]]),
            Err(Error::TooFewSamples { .. })
        ));
        let bad_grid = vec![0.0, 0.1, 0.25];
        assert!(JointTrajectory::new(
            bad_grid,
            [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]],
            [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]
        )
        .is_err());
        assert!(matches!(
            JointTrajectory::new(
                grid(3, 0.1),
                [vec![0.0; 3], vec![0.0; 2], vec![0.0; 3]],
                [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]
            ),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn interpolation_clamps_and_snaps() {
        let t = grid(5, 0.1);
        let samples = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let s = AngularVelocitySeries::new(t, samples, Frame::FootKinematic).unwrap();
        assert_eq!(s.sample_at(-1.0).x, 0.0);
        assert_eq!(s.sample_at(9.0).x, 4.0);
        assert_eq!(s.sample_at(0.3).x, 3.0);
        assert!((s.sample_at(0.25).x - 2.5).abs() < 1e-12);
    }
}
