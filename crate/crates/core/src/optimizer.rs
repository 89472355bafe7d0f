//! Gradient descent on the harmonic coefficients to minimise the condition
//! number of the foot angular-velocity covariance, with joint-limit
//! penalties.
//!
//! The loss is `κ(Σ_FF) + Σ_j w_j · range_j`, where `w_j` is the configured
//! weight for a joint whose trajectory leaves its limits and zero otherwise.
//! The indicators are decided once per iterate and held while the gradient
//! and the step are evaluated, so a step can carry a joint back inside its
//! limits without the penalty jumping under the finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{period_samples, BasisSpec, HarmonicTable};
use crate::covariance::{auto_covariance, condition_number};
use crate::error::{Error, Result};
use crate::kinematics::{
    foot_velocity_unchecked, joint_limit_report, Joint, JointRange, JointTrajectory, LegGeometry,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kappa_objective: f64,
    pub max_iterations: usize,
    /// Initial step length α of every iteration.
    pub step_size: f64,
    pub fd_epsilon: f64,
    /// Hip, thigh, calf.
    pub penalty_weights: [f64; 3],
    /// Hz
    pub imu_rate: f64,
    /// Largest expected sensor time offset, seconds.
    pub offset_range: f64,
    pub seed: u64,
    pub harmonics: usize,
    pub calf_share: f64,
    /// Halvings of α tried before an iteration gives up.
    pub max_backtracks: usize,
    /// Interval the initial coefficients are drawn from, rad/s.
    pub initial_range: [f64; 2],
    /// Longest coefficient update of one step (Euclidean norm, rad/s).
    pub max_step_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kappa_objective: 1.2,
            max_iterations: 5000,
            step_size: 0.2,
            fd_epsilon: 1e-6,
            penalty_weights: [20.0; 3],
            imu_rate: 500.0,
            offset_range: 0.25,
            seed: 0,
            harmonics: 3,
            calf_share: 0.0,
            max_backtracks: 40,
            initial_range: [0.5, 1.5],
            max_step_norm: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_objective >= 1.0) {
            return Err(Error::invalid("kappa_objective", "must be at least 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step_size", "must be positive"));
        }
        if !(self.fd_epsilon > 0.0) || !self.fd_epsilon.is_finite() {
            return Err(Error::invalid("fd_epsilon", "must be positive"));
        }
        if self.penalty_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("penalty_weights", "must be non-negative"));
        }
        if !(self.imu_rate > 0.0) || !self.imu_rate.is_finite() {
            return Err(Error::invalid("imu_rate", "must be positive"));
        }
        if !(self.offset_range > 0.0) || !self.offset_range.is_finite() {
            return Err(Error::invalid("offset_range", "must be positive"));
        }
        if self.harmonics == 0 {
            return Err(Error::invalid("harmonics", "need at least one harmonic"));
        }
        if !(0.0..=1.0).contains(&self.calf_share) {
            return Err(Error::invalid("calf_share", "must lie in [0, 1]"));
        }
        if !(self.max_step_norm > 0.0) {
            return Err(Error::invalid("max_step_norm", "must be positive"));
        }
        let [lo, hi] = self.initial_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid("initial_range", "need lower < upper"));
        }
        Ok(())
    }
}

/// Loss of one spec and the pieces it is built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub kappa: f64,
    /// `w_j · range_j` per joint, zero for joints inside their limits.
    pub penalties: [f64; 3],
    pub ranges: [JointRange; 3],
    pub in_bounds: bool,
}

/// Loss evaluator bound to one spec layout (frequency, harmonics, period).
struct Evaluator<'a> {
    table: HarmonicTable,
    geometry: &'a LegGeometry,
    weights: [f64; 3],
}

struct Eval {
    kappa: f64,
    ranges: [(f64, f64); 3],
}

impl<'a> Evaluator<'a> {
    fn new(spec: &BasisSpec, config: &OptimizerConfig, geometry: &'a LegGeometry) -> Self {
        let window = period_samples(spec.period, config.imu_rate);
        let time: Vec<f64> = (0..window).map(|i| i as f64 / config.imu_rate).collect();
        Self {
            table: HarmonicTable::new(spec.frequency, spec.harmonics(), &time),
            geometry,
            weights: config.penalty_weights,
        }
    }

    fn eval(&self, spec: &BasisSpec) -> Eval {
        let n = self.table.len();
        let rho = spec.calf_share;
        let stance_sum = spec.stance[1] + spec.stance[2];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let [hip, sum, dhip, dsum] = self.table.sample(i, &spec.a, &spec.b);
            let angles = [
                spec.stance[0] + hip,
                spec.stance[1] + (1.0 - rho) * sum,
                spec.stance[2] + rho * sum,
            ];
            for j in 0..3 {
                lo[j] = lo[j].min(angles[j]);
                hi[j] = hi[j].max(angles[j]);
            }
            samples.push(foot_velocity_unchecked(stance_sum + sum, dhip, dsum));
        }
        let kappa = condition_number(&auto_covariance(&samples)).unwrap_or(f64::INFINITY);
        Eval {
            kappa,
            ranges: [0, 1, 2].map(|j| (lo[j], hi[j])),
        }
    }

    /// Penalty indicators at an evaluated point.
    fn active(&self, eval: &Eval) -> [bool; 3] {
        Joint::ALL.map(|joint| {
            let (lo, hi) = eval.ranges[joint.index()];
            let limits = self.geometry.limits(joint);
            !(limits.contains(lo) && limits.contains(hi))
        })
    }

    fn loss(&self, eval: &Eval, active: [bool; 3]) -> f64 {
        let mut loss = eval.kappa;
        for ((on, w), (lo, hi)) in active.iter().zip(self.weights).zip(eval.ranges) {
            if *on {
                loss += w * (hi - lo);
            }
        }
        loss
    }

    fn gradient(&self, spec: &BasisSpec, active: [bool; 3], eps: f64) -> Vec<f64> {
        let n = spec.harmonics();
        let mut grad = vec![0.0; 2 * n];
        let mut probe = spec.clone();
        for (p, g) in grad.iter_mut().enumerate() {
            let base = coefficient(spec, p);
            *coefficient_mut(&mut probe, p) = base + eps;
            let up = self.loss(&self.eval(&probe), active);
            *coefficient_mut(&mut probe, p) = base - eps;
            let down = self.loss(&self.eval(&probe), active);
            *coefficient_mut(&mut probe, p) = base;
            *g = (up - down) / (2.0 * eps);
        }
        grad
    }
}

fn coefficient(spec: &BasisSpec, p: usize) -> f64 {
    let n = spec.harmonics();
    if p < n {
        spec.a[p]
    } else {
        spec.b[p - n]
    }
}

fn coefficient_mut(spec: &mut BasisSpec, p: usize) -> &mut f64 {
    let n = spec.harmonics();
    if p < n {
        &mut spec.a[p]
    } else {
        &mut spec.b[p - n]
    }
}

/// Backtracking along `-grad`: the first halving of the step that lowers the
/// loss (with frozen indicators) and keeps every coefficient finite.
fn descend(
    evaluator: &Evaluator,
    spec: &BasisSpec,
    grad: &[f64],
    active: [bool; 3],
    frozen: f64,
    config: &OptimizerConfig,
) -> Option<(BasisSpec, Eval)> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let mut step = config.step_size.min(config.max_step_norm / norm);
    for _ in 0..=config.max_backtracks {
        let mut candidate = spec.clone();
        for (p, g) in grad.iter().enumerate() {
            *coefficient_mut(&mut candidate, p) -= step * g;
        }
        let eval = evaluator.eval(&candidate);
        let loss = evaluator.loss(&eval, active);
        let finite = loss.is_finite() && candidate.a.iter().chain(&candidate.b).all(|c| c.is_finite());
        if finite && loss < frozen {
            return Some((candidate, eval));
        }
        step *= 0.5;
    }
    None
}

fn breakdown(evaluator: &Evaluator, eval: &Eval, geometry: &LegGeometry) -> LossBreakdown {
    let active = evaluator.active(eval);
    let ranges = Joint::ALL.map(|joint| {
        let (min, max) = eval.ranges[joint.index()];
        let limits = geometry.limits(joint);
        JointRange {
            joint,
            min,
            max,
            range: max - min,
            in_bounds: limits.contains(min) && limits.contains(max),
        }
    });
    let penalties = [0, 1, 2].map(|j| {
        if active[j] {
            evaluator.weights[j] * ranges[j].range
        } else {
            0.0
        }
    });
    LossBreakdown {
        loss: evaluator.loss(eval, active),
        kappa: eval.kappa,
        penalties,
        ranges,
        in_bounds: !active.iter().any(|&a| a),
    }
}

/// Loss of a spec over one period sampled at the configured IMU rate.
pub fn trajectory_loss(
    spec: &BasisSpec,
    config: &OptimizerConfig,
    geometry: &LegGeometry,
) -> Result<LossBreakdown> {
    spec.validate()?;
    config.validate()?;
    geometry.ensure_supported()?;
    let evaluator = Evaluator::new(spec, config, geometry);
    Ok(breakdown(&evaluator, &evaluator.eval(spec), geometry))
}

/// Central-difference gradient of the loss with the penalty indicators held
/// at `spec`. Returned as `(dA, dB)`.
pub fn loss_gradient(
    spec: &BasisSpec,
    config: &OptimizerConfig,
    geometry: &LegGeometry,
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    config.validate()?;
    geometry.ensure_supported()?;
    let evaluator = Evaluator::new(spec, config, geometry);
    let active = evaluator.active(&evaluator.eval(spec));
    let mut grad = evaluator.gradient(spec, active, config.fd_epsilon);
    let db = grad.split_off(spec.harmonics());
    Ok((grad, db))
}

/// Seeded starting point: coefficients uniform in `config.initial_range`,
/// the schedule implied by `config.offset_range`, and a stance that keeps
/// the calf inside its limits.
pub fn initial_spec(config: &OptimizerConfig, geometry: &LegGeometry) -> Result<BasisSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [lo, hi] = config.initial_range;
    let a = (0..config.harmonics).map(|_| rng.random_range(lo..hi)).collect();
    let b = (0..config.harmonics).map(|_| rng.random_range(lo..hi)).collect();
    BasisSpec::for_offset_range(a, b, config.offset_range)?
        .with_calf_share(config.calf_share)?
        .with_stance(BasisSpec::default_stance(geometry))
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub spec: BasisSpec,
    /// `spec` evaluated on one period of the IMU grid, endpoint included.
    pub trajectory: JointTrajectory,
    /// κ of every visited iterate, starting with the initial spec.
    pub kappa_history: Vec<f64>,
    /// Lowest loss seen so far, per visited iterate.
    pub best_loss_history: Vec<f64>,
    /// Accepted gradient steps.
    pub iterations: usize,
    /// κ below the objective with every joint inside its limits.
    pub converged: bool,
    /// The returned spec keeps every joint inside its limits.
    pub feasible: bool,
    pub kappa: f64,
    pub loss: f64,
}

/// Descend from `initial` until κ drops below the objective with all joints
/// in bounds, the iteration budget runs out, or no step length lowers the
/// loss. Returns the best spec seen, preferring feasible ones.
pub fn optimize(
    initial: &BasisSpec,
    config: &OptimizerConfig,
    geometry: &LegGeometry,
) -> Result<OptimizeOutcome> {
    initial.validate()?;
    config.validate()?;
    geometry.ensure_supported()?;
    let evaluator = Evaluator::new(initial, config, geometry);

    let mut spec = initial.clone();
    let mut eval = evaluator.eval(&spec);
    let mut current = breakdown(&evaluator, &eval, geometry);
    if !current.loss.is_finite() {
        return Err(Error::IllConditioned {
            what: "initial foot covariance",
            smallest: 0.0,
            largest: 0.0,
        });
    }

    let mut best = (spec.clone(), current.clone());
    let mut kappa_history = vec![current.kappa];
    let mut best_loss_history = vec![current.loss];
    let mut iterations = 0;
    let mut converged = current.in_bounds && current.kappa < config.kappa_objective;

    while !converged && iterations < config.max_iterations {
        let active = evaluator.active(&eval);
        let frozen = evaluator.loss(&eval, active);
        let grad = evaluator.gradient(&spec, active, config.fd_epsilon);
        let accepted = if grad.iter().all(|g| g.is_finite()) {
            descend(&evaluator, &spec, &grad, active, frozen, config)
        } else {
            None
        };
        let Some((next, next_eval)) = accepted else {
            break;
        };

        spec = next;
        eval = next_eval;
        current = breakdown(&evaluator, &eval, geometry);
        iterations += 1;
        kappa_history.push(current.kappa);

        let better = match (current.in_bounds, best.1.in_bounds) {
            (true, false) => true,
            (false, true) => false,
            _ => current.loss < best.1.loss,
        };
        if better {
            best = (spec.clone(), current.clone());
        }
        best_loss_history.push(best_loss_history.last().unwrap().min(current.loss));
        converged = current.in_bounds && current.kappa < config.kappa_objective;
    }

    let (spec, result) = best;
    let trajectory = crate::basis::eval_basis(&spec, &spec.period_grid(config.imu_rate))?;
    debug_assert_eq!(
        joint_limit_report(&trajectory, geometry)
            .iter()
            .all(|r| r.in_bounds),
        result.in_bounds
    );
    Ok(OptimizeOutcome {
        spec,
        trajectory,
        kappa_history,
        best_loss_history,
        iterations,
        converged: result.in_bounds && result.kappa < config.kappa_objective,
        feasible: result.in_bounds,
        kappa: result.kappa,
        loss: result.loss,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use nalgebra::{Matrix3, Vector3};

    use super::*;
    use crate::kinematics::JointLimits;

    fn wide_geometry(hip: f64) -> LegGeometry {
        LegGeometry::with_limits([
            JointLimits::new(-hip, hip).unwrap(),
            JointLimits::new(-10.0, 10.0).unwrap(),
            JointLimits::new(-10.0, 10.0).unwrap(),
        ])
        .unwrap()
    }

    fn oracle_kappa(spec: &BasisSpec, rate: f64) -> f64 {
        // two-pass covariance and a symmetric eigen-decomposition
        let n = (spec.period * rate).round() as usize;
        let w: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                let (mut dh, mut s, mut ds) = (0.0, 0.0, 0.0);
                for k in 0..spec.harmonics() {
                    let kf = (k + 1) as f64 * spec.frequency;
                    dh += spec.a[k] * (kf * t).sin();
                    ds += spec.b[k] * (kf * t).cos();
                    s += spec.b[k] / kf * (kf * t).sin();
                }
                s += spec.stance[1] + spec.stance[2];
                Vector3::new(-dh * s.sin(), -dh * s.cos(), ds)
            })
            .collect();
        let mean = w.iter().sum::<Vector3<f64>>() / n as f64;
        let mut c = Matrix3::zeros();
        for v in &w {
            for r in 0..3 {
                for q in 0..3 {
                    c[(r, q)] += (v[r] - mean[r]) * (v[q] - mean[q]);
                }
            }
        }
        c /= (n - 1) as f64;
        let eig = c.symmetric_eigen().eigenvalues;
        eig.max() / eig.min()
    }

    #[test]
    fn in_bounds_loss_is_kappa() {
        let spec = BasisSpec::new(vec![0.5], vec![1.0], PI, 2.0).unwrap();
        let geometry = wide_geometry(3.0);
        let lb = trajectory_loss(&spec, &OptimizerConfig::default(), &geometry).unwrap();
        assert!(lb.in_bounds);
        assert_eq!(lb.penalties, [0.0; 3]);
        assert_eq!(lb.loss, lb.kappa);
    }

    #[test]
    fn violated_limit_adds_weighted_range() {
        let spec = BasisSpec::new(vec![0.5], vec![1.0], PI, 2.0).unwrap();
        let mut geometry = wide_geometry(3.0);
        geometry.limits[0] = JointLimits::new(-0.05, 0.05).unwrap();
        let config = OptimizerConfig::default();
        let lb = trajectory_loss(&spec, &config, &geometry).unwrap();
        assert!(!lb.in_bounds);
        let hip = lb.ranges[0];
        assert!(!hip.in_bounds);
        assert_eq!(lb.penalties[0], config.penalty_weights[0] * hip.range);
        assert_eq!(lb.penalties[1], 0.0);
        assert_eq!(lb.loss, lb.kappa + lb.penalties[0]);
        // hip amplitude A/f over a full period
        assert!((hip.range - 2.0 * 0.5 / PI).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_independent_oracle() {
        let spec = BasisSpec::new(vec![1.0], vec![1.0], PI, 2.0).unwrap();
        let lb = trajectory_loss(&spec, &OptimizerConfig::default(), &wide_geometry(3.0)).unwrap();
        let oracle = oracle_kappa(&spec, 500.0);
        assert!((lb.kappa - oracle).abs() <= 1e-9 * oracle);
    }

    #[test]
    fn initial_spec_is_seeded() {
        let g = LegGeometry::default();
        let c = OptimizerConfig::default();
        let a = initial_spec(&c, &g).unwrap();
        assert_eq!(a, initial_spec(&c, &g).unwrap());
        assert_ne!(a, initial_spec(&OptimizerConfig { seed: 1, ..c.clone() }, &g).unwrap());
        assert_eq!(a.harmonics(), 3);
        assert!(a.a.iter().chain(&a.b).all(|v| (0.5..1.5).contains(v)));
        assert!((a.frequency - PI).abs() < 1e-15);
        assert_eq!(a.period, 2.0);
    }

    #[test]
    fn satisfied_initial_spec_is_returned_unchanged() {
        let spec = BasisSpec::new(vec![0.5], vec![1.0], PI, 2.0).unwrap();
        let geometry = wide_geometry(3.0);
        let kappa = trajectory_loss(&spec, &OptimizerConfig::default(), &geometry)
            .unwrap()
            .kappa;
        let config = OptimizerConfig {
            kappa_objective: kappa + 1.0,
            ..OptimizerConfig::default()
        };
        let out = optimize(&spec, &config, &geometry).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.spec, spec);
        assert!(out.converged);
        assert_eq!(out.kappa_history.len(), 1);
    }

    fn single_harmonic(seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            harmonics: 1,
            kappa_objective: 1.5,
            initial_range: [0.5, 2.0],
            seed,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn single_harmonic_is_bounded_by_default_hip_limits() {
        // a grid search over (A, B) inside the default limits bottoms out at
        // κ ≈ 6.79; the hip amplitude the unconstrained optimum needs is
        // about 2.6 rad
        let geometry = LegGeometry::default();
        for seed in 0..3 {
            let config = single_harmonic(seed);
            let out = optimize(&initial_spec(&config, &geometry).unwrap(), &config, &geometry).unwrap();
            assert!(out.feasible);
            assert!(!out.converged);
            assert!(out.kappa > 6.5 && out.kappa < 7.5, "seed {seed}: kappa {}", out.kappa);
        }
    }

    #[test]
    fn single_harmonic_with_room_for_hip() {
        let geometry = wide_geometry(3.0);
        for seed in 0..5 {
            let config = single_harmonic(seed);
            let init = initial_spec(&config, &geometry).unwrap();
            let start = trajectory_loss(&init, &config, &geometry).unwrap().kappa;
            let out = optimize(&init, &config, &geometry).unwrap();
            assert!(out.feasible);
            assert!(out.kappa < 3.0 && out.kappa < start / 5.0, "seed {seed}: {start} -> {}", out.kappa);
        }
    }

    #[test]
    fn default_run_converges_in_bounds() {
        let geometry = LegGeometry::default();
        let config = OptimizerConfig::default();
        let init = initial_spec(&config, &geometry).unwrap();
        let out = optimize(&init, &config, &geometry).unwrap();
        assert!(out.converged, "kappa {}", out.kappa);
        assert!(out.feasible);
        assert!(joint_limit_report(&out.trajectory, &geometry)
            .iter()
            .all(|r| r.in_bounds));
        assert!(out
            .best_loss_history
            .windows(2)
            .all(|w| w[1] <= w[0]));
        assert_eq!(out.kappa_history.len(), out.iterations + 1);
    }

    #[test]
    fn zero_spec_is_rejected() {
        let spec = BasisSpec::new(vec![0.0], vec![0.0], PI, 2.0).unwrap();
        let err = optimize(&spec, &OptimizerConfig::default(), &wide_geometry(3.0)).unwrap_err();
        assert!(matches!(err, Error::IllConditioned { .. }));
    }

    #[test]
    fn config_validation() {
        let bad = [
            OptimizerConfig { kappa_objective: 0.5, ..Default::default() },
            OptimizerConfig { step_size: 0.0, ..Default::default() },
            OptimizerConfig { fd_epsilon: -1.0, ..Default::default() },
            OptimizerConfig { penalty_weights: [1.0, -1.0, 1.0], ..Default::default() },
            OptimizerConfig { harmonics: 0, ..Default::default() },
            OptimizerConfig { imu_rate: 0.0, ..Default::default() },
            OptimizerConfig { initial_range: [1.0, 1.0], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
