//! Time offset and extrinsic rotation from a kinematic foot series and an
//! IMU series.
//!
//! The offset maximises the trace correlation
//! `r = sqrt(tr(Σ_II⁻¹ Σ_IF Σ_FF⁻¹ Σ_FI) / 3)` between the shifted IMU
//! stream and the foot stream. For the winning offset the rotation comes
//! from the SVD of `Σ_FF⁻¹ Σ_FI`, projected onto SO(3).

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{condition_number, covariance_set, guarded_inverse, CovarianceSet};
use crate::error::{Error, Result};
use crate::kinematics::{AngularVelocitySeries, Frame};

/// Correlation values outside [0, 1] by more than this are flagged.
pub const CORRELATION_SLACK: f64 = 1e-9;

/// Relative gap under which two scan values count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Singular values of `Σ_FF⁻¹ Σ_FI` below this fraction of the largest are
/// treated as missing excitation.
const RANK_TOLERANCE: f64 = 1e-6;

/// Fine candidates on each side of the coarse argmax.
const REFINE_STEPS: i64 = 9;

/// Resample at `t + t_d` on the original grid, holding the edge samples.
pub fn shift_series(series: &AngularVelocitySeries, t_d: f64) -> Result<AngularVelocitySeries> {
    if !t_d.is_finite() {
        return Err(Error::NonFinite("time offset"));
    }
    series.uniform_interval()?;
    let span = series.time()[series.len() - 1] - series.time()[0];
    if t_d.abs() > span {
        return Err(Error::OffsetOutOfRange {
            offset: t_d,
            limit: span,
        });
    }
    if t_d == 0.0 {
        return Ok(series.clone());
    }
    let samples = series
        .time()
        .iter()
        .map(|&t| series.sample_at(t + t_d))
        .collect();
    Ok(series.with_samples(samples, series.frame()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceCorrelation {
    pub r: f64,
    /// The raw value fell outside [0, 1] by more than [`CORRELATION_SLACK`].
    pub clamped: bool,
}

pub fn trace_correlation(cov: &CovarianceSet) -> Result<TraceCorrelation> {
    let inv_ii = guarded_inverse(&cov.sigma_ii, "IMU auto-covariance")?;
    let inv_ff = guarded_inverse(&cov.sigma_ff, "foot auto-covariance")?;
    let r2 = (inv_ii * cov.sigma_if * inv_ff * cov.sigma_fi).trace() / 3.0;
    if !r2.is_finite() {
        return Err(Error::NonFinite("trace correlation"));
    }
    let raw = r2.max(0.0).sqrt();
    let clamped = r2 < -CORRELATION_SLACK || raw > 1.0 + CORRELATION_SLACK;
    Ok(TraceCorrelation {
        r: raw.min(1.0),
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetSearch {
    /// Candidates span `[-range, range]`, seconds.
    pub range: f64,
    /// Coarse candidate spacing, seconds.
    pub step: f64,
    /// Add a pass at `step / 10` around the coarse argmax.
    pub refine: bool,
}

impl OffsetSearch {
    /// `±range` at one sample per step, refined.
    pub fn for_rate(sample_rate: f64, range: f64) -> Self {
        Self {
            range,
            step: 1.0 / sample_rate,
            refine: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::invalid("step", "must be positive"));
        }
        if !(self.range >= 0.0) || !self.range.is_finite() {
            return Err(Error::invalid("range", "must be non-negative"));
        }
        Ok(())
    }

    /// Samples cropped from each end so every candidate (refined ones
    /// included) is scored on the same window.
    pub fn margin_samples(&self, dt: f64) -> usize {
        ((self.range + self.step) / dt - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub time_offset: f64,
    pub correlation: TraceCorrelation,
    /// `(candidate, r)` sorted by candidate.
    pub scan: Vec<(f64, f64)>,
}

struct Paired {
    foot: AngularVelocitySeries,
    margin: usize,
}

fn pair(
    imu: &AngularVelocitySeries,
    foot: &AngularVelocitySeries,
    search: &OffsetSearch,
) -> Result<Paired> {
    search.validate()?;
    imu.expect_frame(Frame::FootIMU)?;
    foot.expect_frame(Frame::FootKinematic)?;
    if imu.len() != foot.len() {
        return Err(Error::LengthMismatch {
            left: imu.len(),
            right: foot.len(),
        });
    }
    let dt = foot.uniform_interval()?;
    imu.uniform_interval()?;
    if (imu.time()[0] - foot.time()[0]).abs() > 1e-6 * dt
        || (imu.time()[imu.len() - 1] - foot.time()[foot.len() - 1]).abs() > 1e-6 * dt
    {
        return Err(Error::MisalignedGrids);
    }
    let span = foot.time()[foot.len() - 1] - foot.time()[0];
    if search.range > span / 4.0 {
        return Err(Error::OffsetOutOfRange {
            offset: search.range,
            limit: span / 4.0,
        });
    }
    let margin = search.margin_samples(dt);
    if foot.len() < 2 * margin + 2 {
        return Err(Error::TooFewSamples {
            needed: 2 * margin + 2,
            got: foot.len(),
        });
    }
    Ok(Paired {
        foot: foot.slice(margin, foot.len() - margin),
        margin,
    })
}

/// IMU samples at `t + t_d` over the cropped window.
fn shifted_window(imu: &AngularVelocitySeries, t_d: f64, margin: usize) -> Result<AngularVelocitySeries> {
    let end = imu.len() - margin;
    let time = imu.time()[margin..end].to_vec();
    let samples = time.iter().map(|&t| imu.sample_at(t + t_d)).collect();
    AngularVelocitySeries::new(time, samples, Frame::FootIMU)
}

fn score(imu: &AngularVelocitySeries, paired: &Paired, t_d: f64) -> Result<TraceCorrelation> {
    let shifted = shifted_window(imu, t_d, paired.margin)?;
    trace_correlation(&covariance_set(&shifted, &paired.foot)?)
}

fn evaluate(
    imu: &AngularVelocitySeries,
    paired: &Paired,
    candidates: &[f64],
) -> Vec<Result<TraceCorrelation>> {
    candidates
        .par_iter()
        .map(|&t_d| score(imu, paired, t_d))
        .collect()
}

/// Index of the best entry; near-ties go to the smallest |t_d|, then to the
/// earlier entry.
fn argmax(scan: &[(f64, f64)]) -> usize {
    let best = scan.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let floor = best - TIE_TOLERANCE * best.abs();
    let mut pick = None::<usize>;
    for (i, &(t, r)) in scan.iter().enumerate() {
        if r >= floor && pick.is_none_or(|p| t.abs() < scan[p].0.abs()) {
            pick = Some(i);
        }
    }
    pick.expect("scan is never empty here")
}

fn absorb(
    candidates: &[f64],
    results: Vec<Result<TraceCorrelation>>,
    entries: &mut Vec<(f64, TraceCorrelation)>,
    first_error: &mut Option<Error>,
) {
    for (&t, res) in candidates.iter().zip(results) {
        match res {
            Ok(c) => entries.push((t, c)),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
}

fn search_offset(
    imu: &AngularVelocitySeries,
    paired: &Paired,
    search: &OffsetSearch,
) -> Result<(OffsetEstimate, usize)> {
    let steps = (search.range / search.step + 1e-9).floor() as i64;
    let coarse: Vec<f64> = (-steps..=steps).map(|j| j as f64 * search.step).collect();

    let mut first_error = None;
    let mut entries: Vec<(f64, TraceCorrelation)> = Vec::new();
    absorb(&coarse, evaluate(imu, paired, &coarse), &mut entries, &mut first_error);

    if search.refine && !entries.is_empty() {
        let scan: Vec<_> = entries.iter().map(|(t, c)| (*t, c.r)).collect();
        let center = scan[argmax(&scan)].0;
        let fine = search.step / 10.0;
        let candidates: Vec<f64> = (-REFINE_STEPS..=REFINE_STEPS)
            .filter(|&i| i != 0)
            .map(|i| center + i as f64 * fine)
            .filter(|t| t.abs() <= search.range + 1e-12)
            .collect();
        let results = evaluate(imu, paired, &candidates);
        absorb(&candidates, results, &mut entries, &mut first_error);
    }

    if entries.is_empty() {
        return Err(first_error.unwrap_or(Error::NoValidCandidate));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let scan: Vec<(f64, f64)> = entries.iter().map(|(t, c)| (*t, c.r)).collect();
    let best = argmax(&scan);
    Ok((
        OffsetEstimate {
            time_offset: entries[best].0,
            correlation: entries[best].1,
            scan,
        },
        best,
    ))
}

/// Grid search for the offset that maximises the trace correlation.
pub fn estimate_time_offset(
    imu: &AngularVelocitySeries,
    foot: &AngularVelocitySeries,
    search: &OffsetSearch,
) -> Result<OffsetEstimate> {
    let paired = pair(imu, foot, search)?;
    search_offset(imu, &paired, search).map(|(est, _)| est)
}

/// Rotation mapping IMU-frame vectors into the foot frame, from the SVD of
/// `Σ_FF⁻¹ Σ_FI`. With `literal_inverse` the transpose is returned instead.
pub fn estimate_rotation(cov: &CovarianceSet, literal_inverse: bool) -> Result<Matrix3<f64>> {
    let inv_ff = guarded_inverse(&cov.sigma_ff, "foot auto-covariance")?;
    let m = inv_ff * cov.sigma_fi;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rotation estimate"));
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let largest = sv.max();
    let weak: Vec<usize> = (0..3).filter(|&i| !(sv[i] > RANK_TOLERANCE * largest)).collect();
    if weak.len() >= 2 {
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
        let dir: Vector3<f64> = u.column(smallest).into();
        let axis = (0..3).max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs())).unwrap();
        return Err(Error::RankDeficient {
            axis: ['x', 'y', 'z'][axis],
            direction: [dir[0], dir[1], dir[2]],
        });
    }
    let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
    let mut d = Vector3::from_element(1.0);
    d[smallest] = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&d) * vt;
    Ok(if literal_inverse { r.transpose() } else { r })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub search: OffsetSearch,
    pub literal_inverse: bool,
}

impl CalibrationOptions {
    pub fn for_rate(sample_rate: f64, range: f64) -> Self {
        Self {
            search: OffsetSearch::for_rate(sample_rate, range),
            literal_inverse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Maps IMU-frame vectors into the foot frame.
    pub rotation: Matrix3<f64>,
    pub time_offset: f64,
    /// Trace correlation at the chosen offset.
    pub correlation: f64,
    pub correlation_clamped: bool,
    /// κ(Σ_FF) over the scored window.
    pub condition_number: f64,
    pub offset_scan: Vec<(f64, f64)>,
}

/// Offset search, then rotation from the covariances at the winning offset.
pub fn calibrate(
    imu: &AngularVelocitySeries,
    foot: &AngularVelocitySeries,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let paired = pair(imu, foot, &options.search)?;
    let (offset, _) = search_offset(imu, &paired, &options.search)?;
    let shifted = shifted_window(imu, offset.time_offset, paired.margin)?;
    let cov = covariance_set(&shifted, &paired.foot)?;
    let rotation = estimate_rotation(&cov, options.literal_inverse)?;
    Ok(CalibrationResult {
        rotation,
        time_offset: offset.time_offset,
        correlation: offset.correlation.r,
        correlation_clamped: offset.correlation.clamped,
        condition_number: condition_number(&cov.sigma_ff)?,
        offset_scan: offset.scan,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::rotation::{euler_to_matrix, geodesic_deg};

    fn series(samples: Vec<Vector3<f64>>, rate: f64, frame: Frame) -> AngularVelocitySeries {
        let t = (0..samples.len()).map(|i| i as f64 / rate).collect();
        AngularVelocitySeries::new(t, samples, frame).unwrap()
    }

    fn rich(n: usize, rate: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                Vector3::new(
                    (2.1 * t).sin() + 0.3 * (5.3 * t).cos(),
                    (3.7 * t).cos() - 0.2 * (1.1 * t).sin(),
                    0.8 * (1.3 * t + 0.4).sin() + 0.4 * (7.9 * t).sin(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_shift_is_identity() {
        let s = series(rich(100, 100.0), 100.0, Frame::FootIMU);
        assert_eq!(shift_series(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn one_sample_shift_advances_index() {
        let s = series(rich(100, 100.0), 100.0, Frame::FootIMU);
        let shifted = shift_series(&s, 0.01).unwrap();
        for i in 0..98 {
            assert_eq!(shifted.samples()[i], s.samples()[i + 1]);
        }
        assert_eq!(shifted.samples()[99], s.samples()[99]);
    }

    #[test]
    fn shift_of_sinusoid_within_interpolation_bound() {
        let rate = 500.0;
        let w = 2.0 * std::f64::consts::TAU;
        let samples = (0..1000)
            .map(|i| Vector3::new((w * i as f64 / rate).sin(), 0.0, 0.0))
            .collect();
        let s = series(samples, rate, Frame::FootIMU);
        let shifted = shift_series(&s, 0.01).unwrap();
        let bound = w * w / (rate * rate) / 8.0;
        for i in 0..990 {
            let exact = (w * (i as f64 / rate + 0.01)).sin();
            assert!((shifted.samples()[i][0] - exact).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn shift_beyond_span_is_rejected() {
        let s = series(rich(10, 100.0), 100.0, Frame::FootIMU);
        assert!(matches!(shift_series(&s, 0.2), Err(Error::OffsetOutOfRange { .. })));
    }

    #[test]
    fn rotated_copy_has_unit_correlation() {
        let r = euler_to_matrix([30.0, 45.0, 60.0]);
        let f = rich(400, 100.0);
        let i: Vec<_> = f.iter().map(|v| r.transpose() * v).collect();
        let foot = series(f, 100.0, Frame::FootKinematic);
        let imu = series(i, 100.0, Frame::FootIMU);
        let cov = covariance_set(&imu, &foot).unwrap();
        let tc = trace_correlation(&cov).unwrap();
        assert!((tc.r - 1.0).abs() < 1e-9);
        let est = estimate_rotation(&cov, false).unwrap();
        assert!(geodesic_deg(&est, &r) < 1e-6);
        let literal = estimate_rotation(&cov, true).unwrap();
        assert!((literal - r.transpose()).amax() < 1e-9);
    }

    #[test]
    fn identical_series_give_identity() {
        let f = rich(300, 100.0);
        let foot = series(f.clone(), 100.0, Frame::FootKinematic);
        let imu = series(f, 100.0, Frame::FootIMU);
        let cov = covariance_set(&imu, &foot).unwrap();
        let est = estimate_rotation(&cov, false).unwrap();
        assert!((est - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn independent_noise_has_low_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = |n| -> Vec<Vector3<f64>> {
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    )
                })
                .collect()
        };
        let foot = series(draw(10_000), 100.0, Frame::FootKinematic);
        let imu = series(draw(10_000), 100.0, Frame::FootIMU);
        let tc = trace_correlation(&covariance_set(&imu, &foot).unwrap()).unwrap();
        assert!(tc.r < 0.05, "r = {}", tc.r);
    }

    #[test]
    fn singular_foot_covariance_is_refused() {
        let f: Vec<_> = rich(200, 100.0).iter().map(|v| Vector3::new(v[0], 0.0, v[2])).collect();
        let foot = series(f, 100.0, Frame::FootKinematic);
        let imu = series(rich(200, 100.0), 100.0, Frame::FootIMU);
        let cov = covariance_set(&imu, &foot).unwrap();
        assert!(matches!(trace_correlation(&cov), Err(Error::IllConditioned { .. })));
        assert!(matches!(estimate_rotation(&cov, false), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn rank_deficient_cross_covariance_names_axis() {
        let cov = CovarianceSet {
            sigma_ii: Matrix3::identity(),
            sigma_ff: Matrix3::identity(),
            sigma_if: Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)),
            sigma_fi: Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)),
            mean_i: Vector3::zeros(),
            mean_f: Vector3::zeros(),
        };
        match estimate_rotation(&cov, false) {
            Err(Error::RankDeficient { axis, .. }) => assert!(axis == 'x' || axis == 'y'),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn recovers_shift_and_rotation() {
        let rate = 100.0;
        let r = euler_to_matrix([-20.0, 10.0, 135.0]);
        let foot = series(rich(2000, rate), rate, Frame::FootKinematic);
        let t_d = 0.07;
        let i: Vec<_> = foot
            .time()
            .iter()
            .map(|&t| r.transpose() * foot.sample_at(t - t_d))
            .collect();
        let imu = series(i, rate, Frame::FootIMU);
        let result = calibrate(&imu, &foot, &CalibrationOptions::for_rate(rate, 0.2)).unwrap();
        assert!((result.time_offset - t_d).abs() < 1e-9);
        assert!(geodesic_deg(&result.rotation, &r) < 1e-6);
        let best = result.offset_scan.iter().map(|s| s.1).fold(f64::MIN, f64::max);
        assert!((result.correlation - best).abs() <= 1e-12);
        assert!(result.offset_scan.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn ties_prefer_small_offsets() {
        let scan = [(-0.02, 1.0), (-0.01, 0.5), (0.0, 0.9), (0.01, 1.0), (0.02, 1.0)];
        assert_eq!(argmax(&scan), 3);
    }

    #[test]
    fn search_range_is_bounded_by_span() {
        let foot = series(rich(100, 100.0), 100.0, Frame::FootKinematic);
        let imu = series(rich(100, 100.0), 100.0, Frame::FootIMU);
        let search = OffsetSearch::for_rate(100.0, 0.5);
        assert!(matches!(
            estimate_time_offset(&imu, &foot, &search),
            Err(Error::OffsetOutOfRange { .. })
        ));
    }
}
