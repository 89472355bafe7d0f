//! Harmonic basis for the calibration motion.
//!
//! The hip rate is a sine series and the summed thigh + calf rate a cosine
//! series at multiples of the base frequency `f`:
//!
//! ```text
//! dθ_hip(t)         = Σ_k A_k sin(k f t)
//! dθ_thigh + dθ_calf = Σ_k B_k cos(k f t)
//! θ_hip(t)          = -Σ_k A_k/(k f) cos(k f t)
//! θ_thigh + θ_calf  =  Σ_k B_k/(k f) sin(k f t)
//! ```
//!
//! The summed motion is split between thigh and calf by `calf_share`, and
//! a constant stance is added on top. A stance whose thigh and calf entries
//! cancel leaves the foot angular velocity untouched.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Joint, JointTrajectory, LegGeometry};

/// Base frequency, period and sample grid derived from the IMU rate and the
/// time-offset search range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// rad/s
    pub frequency: f64,
    /// seconds
    pub period: f64,
    /// Hz
    pub imu_rate: f64,
    /// `i / imu_rate` for `i = 0 ..= floor(period * imu_rate)`.
    pub time_grid: Vec<f64>,
}

impl Schedule {
    /// Number of leading grid samples forming exactly one period, `[0, T)`.
    ///
    /// The grid closes on `t = T` when `T * imu_rate` is integral; that last
    /// sample repeats `t = 0` and is left out of period averages.
    pub fn period_samples(&self) -> usize {
        period_samples(self.period, self.imu_rate).min(self.time_grid.len())
    }
}

pub(crate) fn period_samples(period: f64, imu_rate: f64) -> usize {
    let exact = period * imu_rate;
    let nearest = exact.round();
    if (exact - nearest).abs() < 1e-9 * exact.max(1.0) {
        nearest as usize
    } else {
        exact.floor() as usize + 1
    }
}

pub(crate) fn grid_len(period: f64, imu_rate: f64) -> usize {
    (period * imu_rate + 1e-9).floor() as usize + 1
}

/// `f = π/(4 t_r)`, `T = 8 t_r`, `λ = {i/f_IMU}`.
pub fn derive_schedule(imu_rate: f64, offset_range: f64) -> Result<Schedule> {
    if !(imu_rate > 0.0) || !imu_rate.is_finite() {
        return Err(Error::invalid("imu_rate", "must be positive and finite"));
    }
    if !(offset_range > 0.0) || !offset_range.is_finite() {
        return Err(Error::invalid("offset_range", "must be positive and finite"));
    }
    let frequency = PI / (4.0 * offset_range);
    let period = 8.0 * offset_range;
    let time_grid = (0..grid_len(period, imu_rate))
        .map(|i| i as f64 / imu_rate)
        .collect();
    Ok(Schedule {
        frequency,
        period,
        imu_rate,
        time_grid,
    })
}

/// Harmonic coefficients and timing of a calibration motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Hip sine coefficients `A_k`, rad/s.
    pub a: Vec<f64>,
    /// Thigh + calf cosine coefficients `B_k`, rad/s.
    pub b: Vec<f64>,
    /// Base frequency `f`, rad/s.
    pub frequency: f64,
    /// Period `T`, seconds.
    pub period: f64,
    /// Fraction of the summed thigh + calf motion carried by the calf.
    pub calf_share: f64,
    /// Constant joint offsets (hip, thigh, calf) added to the closed forms.
    pub stance: [f64; 3],
}

impl BasisSpec {
    pub fn new(a: Vec<f64>, b: Vec<f64>, frequency: f64, period: f64) -> Result<Self> {
        let spec = Self {
            a,
            b,
            frequency,
            period,
            calf_share: 0.0,
            stance: [0.0; 3],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Coefficients on the schedule implied by an offset range `t_r`.
    pub fn for_offset_range(a: Vec<f64>, b: Vec<f64>, offset_range: f64) -> Result<Self> {
        if !(offset_range > 0.0) {
            return Err(Error::invalid("offset_range", "must be positive"));
        }
        Self::new(a, b, PI / (4.0 * offset_range), 8.0 * offset_range)
    }

    pub fn with_calf_share(mut self, calf_share: f64) -> Result<Self> {
        self.calf_share = calf_share;
        self.validate()?;
        Ok(self)
    }

    pub fn with_stance(mut self, stance: [f64; 3]) -> Result<Self> {
        self.stance = stance;
        self.validate()?;
        Ok(self)
    }

    /// Stance that centres the calf in its limits with thigh and calf offsets
    /// cancelling, hip at zero.
    pub fn default_stance(geometry: &LegGeometry) -> [f64; 3] {
        let calf = geometry.limits(Joint::Calf).midpoint();
        [0.0, -calf, calf]
    }

    pub fn harmonics(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() {
            return Err(Error::invalid("harmonics", "need at least one harmonic"));
        }
        if self.a.len() != self.b.len() {
            return Err(Error::invalid(
                "coefficients",
                format!("A has {} entries, B has {}", self.a.len(), self.b.len()),
            ));
        }
        if self.a.iter().chain(&self.b).any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("basis coefficient"));
        }
        if !(self.frequency > 0.0) || !self.frequency.is_finite() {
            return Err(Error::invalid("frequency", "must be positive and finite"));
        }
        if !(self.period > 0.0) || !self.period.is_finite() {
            return Err(Error::invalid("period", "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.calf_share) {
            return Err(Error::invalid("calf_share", "must lie in [0, 1]"));
        }
        if self.stance.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("stance"));
        }
        Ok(())
    }

    /// Inclusive sample grid `{i / imu_rate : i = 0 ..= floor(T imu_rate)}`.
    pub fn period_grid(&self, imu_rate: f64) -> Vec<f64> {
        (0..grid_len(self.period, imu_rate))
            .map(|i| i as f64 / imu_rate)
            .collect()
    }
}

/// `sin(k f t)` and `cos(k f t)` for every grid point and harmonic, so
/// repeated evaluations on one grid skip the trigonometry.
#[derive(Debug, Clone)]
pub(crate) struct HarmonicTable {
    harmonics: usize,
    frequency: f64,
    time: Vec<f64>,
    // row-major: [sample * harmonics + (k - 1)]
    sin: Vec<f64>,
    cos: Vec<f64>,
}

impl HarmonicTable {
    pub(crate) fn new(frequency: f64, harmonics: usize, time: &[f64]) -> Self {
        let mut sin = Vec::with_capacity(time.len() * harmonics);
        let mut cos = Vec::with_capacity(time.len() * harmonics);
        for &t in time {
            for k in 1..=harmonics {
                let (s, c) = (k as f64 * frequency * t).sin_cos();
                sin.push(s);
                cos.push(c);
            }
        }
        Self {
            harmonics,
            frequency,
            time: time.to_vec(),
            sin,
            cos,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.time.len()
    }

    /// Per-sample (θ_hip, Σθ, dθ_hip, dΣθ) without stance or split.
    #[inline]
    pub(crate) fn sample(&self, n: usize, a: &[f64], b: &[f64]) -> [f64; 4] {
        let row = n * self.harmonics;
        let (mut hip, mut sum, mut dhip, mut dsum) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..self.harmonics {
            let s = self.sin[row + k];
            let c = self.cos[row + k];
            let kf = (k + 1) as f64 * self.frequency;
            dhip += a[k] * s;
            dsum += b[k] * c;
            hip -= a[k] / kf * c;
            sum += b[k] / kf * s;
        }
        [hip, sum, dhip, dsum]
    }

    pub(crate) fn trajectory(&self, spec: &BasisSpec) -> Result<JointTrajectory> {
        let n = self.len();
        let rho = spec.calf_share;
        let mut theta = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut dtheta = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let [hip, sum, dhip, dsum] = self.sample(i, &spec.a, &spec.b);
            theta[0][i] = spec.stance[0] + hip;
            theta[1][i] = spec.stance[1] + (1.0 - rho) * sum;
            theta[2][i] = spec.stance[2] + rho * sum;
            dtheta[0][i] = dhip;
            dtheta[1][i] = (1.0 - rho) * dsum;
            dtheta[2][i] = rho * dsum;
        }
        JointTrajectory::new(self.time.clone(), theta, dtheta)
    }
}

/// Joint angles and rates of a basis motion on an arbitrary time grid.
pub fn eval_basis(spec: &BasisSpec, time_grid: &[f64]) -> Result<JointTrajectory> {
    spec.validate()?;
    HarmonicTable::new(spec.frequency, spec.harmonics(), time_grid).trajectory(spec)
}
