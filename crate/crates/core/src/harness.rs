//! Experiment matrix: optimise a trajectory per foot, simulate every
//! (foot, motion, noise, seed) cell, calibrate, and report CN / CC / RE and
//! the time-offset error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, period_samples, BasisSpec};
use crate::cca::{calibrate, CalibrationOptions, CalibrationResult};
use crate::covariance::{condition_number, covariance_ff};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::kinematics::{trajectory_to_foot_velocity, AngularVelocitySeries, JointTrajectory, LegGeometry};
use crate::optimizer::{initial_spec, optimize, OptimizeOutcome, OptimizerConfig};
use crate::rotation::{is_gimbal_locked, rotation_error};
use crate::sim::{baseline_gait, simulate_imu, GaitKind, GaitParams, GroundTruth, NoiseModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Foot {
    FL,
    FR,
    RL,
    RR,
}

impl Foot {
    pub const ALL: [Foot; 4] = [Foot::FL, Foot::FR, Foot::RL, Foot::RR];

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Foot::FL => "FL",
            Foot::FR => "FR",
            Foot::RL => "RL",
            Foot::RR => "RR",
        }
    }
}

impl fmt::Display for Foot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Foot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Foot::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse {
                what: "foot",
                reason: format!("unknown foot `{s}` (FL, FR, RL, RR)"),
            })
    }
}

/// Motion used for a calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// The condition-number optimised harmonic trajectory.
    #[serde(alias = "a2i")]
    Optimized,
    Walk,
    Spin,
    Wave,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Optimized, Motion::Walk, Motion::Spin, Motion::Wave];

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Motion::Optimized => "optimized",
            Motion::Walk => "walk",
            Motion::Spin => "spin",
            Motion::Wave => "wave",
        }
    }

    fn gait(self) -> Option<GaitKind> {
        match self {
            Motion::Optimized => None,
            Motion::Walk => Some(GaitKind::Walk),
            Motion::Spin => Some(GaitKind::Spin),
            Motion::Wave => Some(GaitKind::Wave),
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "optimized" | "a2i" => Ok(Motion::Optimized),
            "walk" => Ok(Motion::Walk),
            "spin" => Ok(Motion::Spin),
            "wave" => Ok(Motion::Wave),
            other => Err(Error::Parse {
                what: "motion",
                reason: format!("unknown motion `{other}` (optimized, walk, spin, wave)"),
            }),
        }
    }
}

/// Mounting truth of one foot IMU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootTruth {
    pub foot: Foot,
    pub euler_deg: [f64; 3],
    pub t_d_s: f64,
}

impl FootTruth {
    pub fn to_truth(&self) -> Result<GroundTruth> {
        GroundTruth::from_euler_deg(self.euler_deg, self.t_d_s)
    }
}

/// Baseline gait shape; duration and sample rate follow the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitShape {
    /// Seconds per gait cycle.
    pub period: f64,
    /// Hip, thigh, calf amplitudes in rad.
    pub amplitudes: [f64; 3],
    pub stance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub geometry: LegGeometry,
    /// Per-foot geometry replacing `geometry`.
    pub foot_geometry: BTreeMap<Foot, LegGeometry>,
    /// Mounting truths; feet left out get a seeded random truth.
    pub truths: Vec<FootTruth>,
    pub truth_seed: u64,
    /// Random truths draw their offset from the sample grid within this
    /// bound, seconds.
    pub max_time_offset: f64,
    /// °/s/√Hz
    pub noise_densities: Vec<f64>,
    pub motions: Vec<Motion>,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    /// Replacement shapes for the walk, spin and wave gaits.
    pub gaits: BTreeMap<Motion, GaitShape>,
    /// Whole optimised periods inside the scored window.
    pub cycles: usize,
    /// Std of white noise on the joint rates the calibrator sees, rad/s.
    pub encoder_noise: f64,
    pub write_scans: bool,
    /// Where `run_matrix` callers write reports when no directory is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: LegGeometry::default(),
            foot_geometry: BTreeMap::new(),
            truths: Vec::new(),
            truth_seed: 2024,
            max_time_offset: 0.1,
            noise_densities: vec![0.006, 0.03, 0.06],
            motions: Motion::ALL.to_vec(),
            optimizer: OptimizerConfig::default(),
            seeds: (0..20).collect(),
            gaits: BTreeMap::new(),
            cycles: 4,
            encoder_noise: 0.0,
            write_scans: true,
            output_dir: None,
        }
    }
}

/// Euler triples reported for a real robot's foot IMUs.
pub const HARDWARE_EULER_DEG: [[f64; 3]; 4] = [
    [104.0, 17.0, 21.0],
    [136.0, -11.0, 55.0],
    [56.0, -32.0, -129.0],
    [92.0, -21.0, 115.0],
];

impl ExperimentConfig {
    /// Default matrix with the hardware mounting rotations and zero offsets.
    pub fn hardware_preset() -> Self {
        Self {
            truths: Foot::ALL
                .iter()
                .zip(HARDWARE_EULER_DEG)
                .map(|(&foot, euler_deg)| FootTruth {
                    foot,
                    euler_deg,
                    t_d_s: 0.0,
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.motions.is_empty() {
            return Err(Error::invalid("motions", "need at least one motion"));
        }
        if self.noise_densities.is_empty() {
            return Err(Error::invalid("noise_densities", "need at least one noise level"));
        }
        if self.noise_densities.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid("noise_densities", "must be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "need at least one seed"));
        }
        if self.cycles == 0 {
            return Err(Error::invalid("cycles", "need at least one period"));
        }
        if !(self.encoder_noise >= 0.0) || !self.encoder_noise.is_finite() {
            return Err(Error::invalid("encoder_noise", "must be non-negative"));
        }
        self.optimizer.validate()?;
        if !(self.max_time_offset >= 0.0) || self.max_time_offset > self.optimizer.offset_range {
            return Err(Error::invalid(
                "max_time_offset",
                "must lie within the optimizer offset range",
            ));
        }
        if self.gaits.contains_key(&Motion::Optimized) {
            return Err(Error::invalid("gaits", "the optimized motion has no gait shape"));
        }
        for motion in self.gaits.keys() {
            self.gait_params(*motion)?.validate()?;
        }
        self.geometry.validate()?;
        for g in self.foot_geometry.values() {
            g.validate()?;
        }
        for t in &self.truths {
            if t.t_d_s.abs() > self.optimizer.offset_range {
                return Err(Error::invalid(
                    "truths",
                    format!("{} offset {} s exceeds the search range", t.foot, t.t_d_s),
                ));
            }
            t.to_truth()?;
        }
        Ok(())
    }

    pub fn geometry_for(&self, foot: Foot) -> &LegGeometry {
        self.foot_geometry.get(&foot).unwrap_or(&self.geometry)
    }

    /// Configured truth, or a seeded random rotation away from gimbal lock
    /// with an on-grid offset.
    pub fn truth_for(&self, foot: Foot) -> Result<FootTruth> {
        if let Some(t) = self.truths.iter().find(|t| t.foot == foot) {
            return Ok(t.clone());
        }
        let rate = self.optimizer.imu_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.truth_seed, foot.index()]));
        let max_steps = (self.max_time_offset * rate + 1e-9).floor() as i64;
        loop {
            let truth = GroundTruth::random(&mut rng, rate, max_steps);
            let euler_deg = truth.euler_deg();
            if euler_deg[1].abs() < 80.0 && !is_gimbal_locked(euler_deg) {
                return Ok(FootTruth {
                    foot,
                    euler_deg,
                    t_d_s: truth.time_offset,
                });
            }
        }
    }

    /// Optimizer configuration for one foot: its own seed stream.
    pub fn optimizer_for(&self, foot: Foot) -> OptimizerConfig {
        OptimizerConfig {
            seed: mix(&[self.optimizer.seed, foot.index()]),
            ..self.optimizer.clone()
        }
    }

    /// Gait parameters of a baseline motion over one record.
    pub fn gait_params(&self, motion: Motion) -> Result<GaitParams> {
        let kind = motion
            .gait()
            .ok_or(Error::invalid("motion", "the optimized motion is not a gait"))?;
        let rate = self.optimizer.imu_rate;
        let mut params = GaitParams {
            duration: (self.record_len() - 1) as f64 / rate,
            sample_rate: rate,
            ..GaitParams::default_for(kind)
        };
        if let Some(shape) = self.gaits.get(&motion) {
            params.period = shape.period;
            params.amplitudes = shape.amplitudes;
            params.stance = shape.stance;
        }
        Ok(params)
    }

    /// Joint trajectory of a motion on the record grid `{i / rate}`; the
    /// optimized motion needs its basis spec.
    pub fn motion_trajectory(&self, motion: Motion, optimized: Option<&BasisSpec>) -> Result<JointTrajectory> {
        match motion.gait() {
            None => {
                let spec = optimized.ok_or(Error::invalid("motion", "optimized motion needs a basis spec"))?;
                let rate = self.optimizer.imu_rate;
                let grid: Vec<f64> = (0..self.record_len()).map(|i| i as f64 / rate).collect();
                eval_basis(spec, &grid)
            }
            Some(kind) => baseline_gait(kind, &self.gait_params(motion)?),
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions::for_rate(self.optimizer.imu_rate, self.optimizer.offset_range)
    }

    /// Samples per record: `cycles` optimised periods plus the offset-search
    /// margin on each side.
    pub fn record_len(&self) -> usize {
        let rate = self.optimizer.imu_rate;
        let period = 8.0 * self.optimizer.offset_range;
        let margin = self.calibration_options().search.margin_samples(1.0 / rate);
        self.cycles * period_samples(period, rate) + 2 * margin
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a seed tuple.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x853C_49E6_748F_EA9B, |h, &p| splitmix64(h ^ splitmix64(p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub foot: Foot,
    pub motion: Motion,
    pub noise_density: f64,
    pub seed: u64,
    /// `ok`, or the error kind that stopped the calibration.
    pub status: String,
    /// κ(Σ_FF) of the scored window; known even when calibration fails.
    pub cn: f64,
    pub cc: f64,
    pub re_deg: f64,
    pub geodesic_deg: f64,
    pub gimbal_lock: bool,
    pub td_true_s: f64,
    pub td_est_s: f64,
    pub td_error_ms: f64,
    pub error: String,
}

impl ReportRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const ROW_HEADER: [&str; 14] = [
    "foot",
    "motion",
    "noise_density",
    "seed",
    "status",
    "cn",
    "cc",
    "re_deg",
    "geodesic_deg",
    "gimbal_lock",
    "td_true_s",
    "td_est_s",
    "td_error_ms",
    "error",
];

impl ReportRow {
    fn record(&self) -> [String; 14] {
        [
            self.foot.to_string(),
            self.motion.to_string(),
            fmt_f64(self.noise_density),
            self.seed.to_string(),
            self.status.clone(),
            fmt_f64(self.cn),
            fmt_f64(self.cc),
            fmt_f64(self.re_deg),
            fmt_f64(self.geodesic_deg),
            self.gimbal_lock.to_string(),
            fmt_f64(self.td_true_s),
            fmt_f64(self.td_est_s),
            fmt_f64(self.td_error_ms),
            self.error.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub motion: Motion,
    pub noise_density: f64,
    pub rows: usize,
    pub failures: usize,
    pub median_cn: Option<f64>,
    pub median_cc: Option<f64>,
    pub median_re_deg: Option<f64>,
    pub median_abs_td_error_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryCell>,
    pub truths: Vec<FootTruth>,
    pub optimized: BTreeMap<Foot, OptimizeOutcome>,
}

/// Median of the finite values; mean of the middle pair for even counts.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<(Motion, u64), Vec<&ReportRow>> = BTreeMap::new();
    for row in rows {
        // total order on non-negative densities
        groups
            .entry((row.motion, row.noise_density.to_bits()))
            .or_default()
            .push(row);
    }
    let mut cells: Vec<SummaryCell> = groups
        .into_iter()
        .map(|((motion, bits), group)| {
            let ok: Vec<&&ReportRow> = group.iter().filter(|r| r.is_ok()).collect();
            SummaryCell {
                motion,
                noise_density: f64::from_bits(bits),
                rows: group.len(),
                failures: group.len() - ok.len(),
                median_cn: median(group.iter().map(|r| r.cn)),
                median_cc: median(ok.iter().map(|r| r.cc)),
                median_re_deg: median(ok.iter().map(|r| r.re_deg)),
                median_abs_td_error_ms: median(ok.iter().map(|r| r.td_error_ms.abs())),
            }
        })
        .collect();
    cells.sort_by(|a, b| {
        a.motion
            .cmp(&b.motion)
            .then(a.noise_density.total_cmp(&b.noise_density))
    });
    cells
}

struct FootContext {
    foot: Foot,
    truth: GroundTruth,
    truth_doc: FootTruth,
    trajectories: BTreeMap<Motion, JointTrajectory>,
    /// Clean kinematic series per motion.
    motions: BTreeMap<Motion, AngularVelocitySeries>,
    geometry: LegGeometry,
}

struct CellOutput {
    row: ReportRow,
    scan: Vec<(f64, f64)>,
    seconds: f64,
}

fn window_condition_number(foot: &AngularVelocitySeries, margin: usize) -> f64 {
    covariance_ff(&foot.slice(margin, foot.len() - margin))
        .and_then(|c| condition_number(&c))
        .unwrap_or(f64::NAN)
}

fn run_cell(
    ctx: &FootContext,
    config: &ExperimentConfig,
    motion: Motion,
    density: f64,
    seed: u64,
) -> CellOutput {
    let start = Instant::now();
    let rate = config.optimizer.imu_rate;
    let options = config.calibration_options();
    let margin = options.search.margin_samples(1.0 / rate);
    let cell_seed = mix(&[seed, ctx.foot.index(), motion.index(), density.to_bits()]);
    let clean = &ctx.motions[&motion];

    let mut row = ReportRow {
        foot: ctx.foot,
        motion,
        noise_density: density,
        seed,
        status: "ok".into(),
        cn: f64::NAN,
        cc: f64::NAN,
        re_deg: f64::NAN,
        geodesic_deg: f64::NAN,
        gimbal_lock: false,
        td_true_s: ctx.truth.time_offset,
        td_est_s: f64::NAN,
        td_error_ms: f64::NAN,
        error: String::new(),
    };

    let outcome = (|| -> Result<(CalibrationResult, f64)> {
        let noise = NoiseModel::new(density, rate, cell_seed)?;
        let imu = simulate_imu(clean, &ctx.truth, &noise)?;
        let seen = observed_foot(ctx, config, motion, cell_seed)?;
        let cn = window_condition_number(&seen, margin);
        Ok((calibrate(&imu, &seen, &options)?, cn))
    })();

    let mut scan = Vec::new();
    match outcome {
        Ok((result, cn)) => {
            row.cn = cn;
            row.cc = result.correlation;
            row.td_est_s = result.time_offset;
            row.td_error_ms = (result.time_offset - ctx.truth.time_offset) * 1e3;
            match rotation_error(&result.rotation, ctx.truth_doc.euler_deg) {
                Ok(err) => {
                    row.re_deg = err.re_deg;
                    row.geodesic_deg = err.geodesic_deg;
                    row.gimbal_lock = err.gimbal_lock;
                }
                Err(e) => {
                    row.status = e.kind().into();
                    row.error = e.to_string();
                }
            }
            scan = result.offset_scan;
        }
        Err(e) => {
            row.cn = window_condition_number(clean, margin);
            row.status = e.kind().into();
            row.error = e.to_string();
        }
    }
    CellOutput {
        row,
        scan,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Kinematic series handed to the calibrator: the clean one, or one rebuilt
/// from joint rates with encoder noise.
fn observed_foot(
    ctx: &FootContext,
    config: &ExperimentConfig,
    motion: Motion,
    cell_seed: u64,
) -> Result<AngularVelocitySeries> {
    let clean = &ctx.motions[&motion];
    if config.encoder_noise == 0.0 {
        return Ok(clean.clone());
    }
    let traj = &ctx.trajectories[&motion];
    let normal = Normal::new(0.0, config.encoder_noise)
        .map_err(|e| Error::invalid("encoder_noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cell_seed, 0xE1C0_DE25]));
    let noisy = traj.map_rates(|_, _, v| v + normal.sample(&mut rng))?;
    trajectory_to_foot_velocity(&ctx.geometry, &noisy)
}

fn prepare_foot(
    config: &ExperimentConfig,
    foot: Foot,
    optimized: &mut BTreeMap<Foot, OptimizeOutcome>,
) -> Result<FootContext> {
    let geometry = config.geometry_for(foot).clone();
    let truth_doc = config.truth_for(foot)?;
    let truth = truth_doc.to_truth()?;
    let mut trajectories = BTreeMap::new();
    let mut motions = BTreeMap::new();
    for &motion in &config.motions {
        if motions.contains_key(&motion) {
            continue;
        }
        let spec = if motion == Motion::Optimized {
            let opt_config = config.optimizer_for(foot);
            let outcome = optimize(&initial_spec(&opt_config, &geometry)?, &opt_config, &geometry)?;
            let spec = outcome.spec.clone();
            optimized.insert(foot, outcome);
            Some(spec)
        } else {
            None
        };
        let traj = config.motion_trajectory(motion, spec.as_ref())?;
        motions.insert(motion, trajectory_to_foot_velocity(&geometry, &traj)?);
        trajectories.insert(motion, traj);
    }
    Ok(FootContext {
        foot,
        truth,
        truth_doc,
        trajectories,
        motions,
        geometry,
    })
}

struct Writers {
    rows: csv::Writer<BufWriter<File>>,
    timings: csv::Writer<BufWriter<File>>,
}

fn open_writers(dir: &Path, config: &ExperimentConfig) -> Result<Writers> {
    fs::create_dir_all(dir)?;
    if config.write_scans {
        fs::create_dir_all(dir.join("scans"))?;
    }
    let mut rows = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("rows.csv"))?));
    rows.write_record(ROW_HEADER)?;
    let mut timings = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("timings.csv"))?));
    timings.write_record(["foot", "motion", "noise_density", "seed", "wall_time_s"])?;
    Ok(Writers { rows, timings })
}

fn scan_file_name(row: &ReportRow) -> String {
    format!("{}_{}_{}_{}.csv", row.foot, row.motion, row.noise_density, row.seed)
}

fn write_cell(dir: &Path, writers: &mut Writers, cell: &CellOutput, scans: bool) -> Result<()> {
    let row = &cell.row;
    writers.rows.write_record(row.record())?;
    writers.timings.write_record([
        row.foot.to_string(),
        row.motion.to_string(),
        fmt_f64(row.noise_density),
        row.seed.to_string(),
        format!("{:.6}", cell.seconds),
    ])?;
    if scans && !cell.scan.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("scans").join(scan_file_name(row)))?;
        w.write_record(["t_d", "r"])?;
        for &(t, r) in &cell.scan {
            w.write_record([fmt_f64(t), fmt_f64(r)])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_summary(dir: &Path, report: &MatrixReport, config: &ExperimentConfig) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "motion",
        "noise_density",
        "rows",
        "failures",
        "median_cn",
        "median_cc",
        "median_re_deg",
        "median_abs_td_error_ms",
    ])?;
    for c in &report.summary {
        w.write_record([
            c.motion.to_string(),
            fmt_f64(c.noise_density),
            c.rows.to_string(),
            c.failures.to_string(),
            opt(c.median_cn),
            opt(c.median_cc),
            opt(c.median_re_deg),
            opt(c.median_abs_td_error_ms),
        ])?;
    }
    w.flush()?;

    let optimized: BTreeMap<String, serde_json::Value> = report
        .optimized
        .iter()
        .map(|(foot, o)| {
            (
                foot.to_string(),
                serde_json::json!({
                    "A": o.spec.a,
                    "B": o.spec.b,
                    "kappa_final": o.kappa,
                    "iterations": o.iterations,
                    "converged": o.converged,
                }),
            )
        })
        .collect();
    let doc = serde_json::json!({
        "cells": report.summary,
        "truths": report.truths,
        "optimized": optimized,
    });
    let mut f = BufWriter::new(File::create(dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut f, &doc)?;
    writeln!(f)?;
    f.flush()?;

    let mut resolved = config.clone();
    resolved.truths = report.truths.clone();
    resolved.output_dir = None;
    let mut f = BufWriter::new(File::create(dir.join("config.json"))?);
    serde_json::to_writer_pretty(&mut f, &resolved)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Run every (foot, motion, noise, seed) cell. Rows come back sorted by
/// foot, motion, density and seed; with an output directory they are also
/// streamed to `rows.csv` one foot at a time, followed by the summaries.
pub fn run_matrix(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<MatrixReport> {
    config.validate()?;
    let mut motions = config.motions.clone();
    motions.sort();
    motions.dedup();
    let mut densities = config.noise_densities.clone();
    densities.sort_by(f64::total_cmp);
    densities.dedup();
    let mut seeds = config.seeds.clone();
    seeds.sort();
    seeds.dedup();

    let mut cells = Vec::with_capacity(motions.len() * densities.len() * seeds.len());
    for &m in &motions {
        for &d in &densities {
            for &s in &seeds {
                cells.push((m, d, s));
            }
        }
    }

    let mut writers = out_dir.map(|d| open_writers(d, config)).transpose()?;
    let mut rows = Vec::new();
    let mut truths = Vec::new();
    let mut optimized = BTreeMap::new();

    for foot in Foot::ALL {
        let ctx = prepare_foot(config, foot, &mut optimized)?;
        truths.push(ctx.truth_doc.clone());
        let outputs: Vec<CellOutput> = cells
            .par_iter()
            .map(|&(m, d, s)| run_cell(&ctx, config, m, d, s))
            .collect();
        if let (Some(w), Some(dir)) = (writers.as_mut(), out_dir) {
            for cell in &outputs {
                write_cell(dir, w, cell, config.write_scans)?;
            }
            w.rows.flush()?;
            w.timings.flush()?;
        }
        rows.extend(outputs.into_iter().map(|c| c.row));
    }

    let report = MatrixReport {
        summary: summarize(&rows),
        rows,
        truths,
        optimized,
    };
    if let Some(dir) = out_dir {
        write_summary(dir, &report, config)?;
    }
    Ok(report)
}

/// Off-diagonal and mean residuals of one basis spec over a whole period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalityCheck {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// |off-diagonal| / max diagonal of Σ_FF for (x,y), (x,z), (y,z).
    pub offdiag_ratio: [f64; 3],
    pub max_offdiag_ratio: f64,
    /// Largest off-diagonal entry as `(row, col)`.
    pub worst_entry: (usize, usize),
    /// max(|mean ω_y|, |mean ω_z|) / sqrt(max diagonal).
    pub mean_ratio: f64,
    pub pass: bool,
}

pub const DIAGONALITY_TOLERANCE: f64 = 1e-9;

/// Seeded random specs with 1 to `max_harmonics` harmonics (coefficients in
/// [-2, 2] rad/s) on the schedule for `offset_range`, each checked for a
/// diagonal foot covariance and zero-mean y/z rates over one period.
pub fn diagonality_suite(
    count: usize,
    max_harmonics: usize,
    seed: u64,
    imu_rate: f64,
    offset_range: f64,
) -> Result<Vec<DiagonalityCheck>> {
    if max_harmonics == 0 {
        return Err(Error::invalid("max_harmonics", "need at least one harmonic"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=max_harmonics);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let spec = BasisSpec::for_offset_range(a, b, offset_range)?;
            diagonality(&spec, imu_rate)
        })
        .collect()
}

/// Diagonality residuals of `spec` over one period at `imu_rate`.
pub fn diagonality(spec: &BasisSpec, imu_rate: f64) -> Result<DiagonalityCheck> {
    let n = period_samples(spec.period, imu_rate);
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / imu_rate).collect();
    let traj = eval_basis(spec, &grid)?;
    let foot = trajectory_to_foot_velocity(&LegGeometry::default(), &traj)?;
    let cov = covariance_ff(&foot)?;
    let max_diag = (0..3).map(|i| cov[(i, i)]).fold(0.0, f64::max);
    let ratio = |v: f64| if max_diag > 0.0 { v / max_diag } else { 0.0 };
    let entries = [(0, 1), (0, 2), (1, 2)];
    let offdiag_ratio = entries.map(|(r, c)| ratio(cov[(r, c)].abs()));
    let mut worst = 0;
    for k in 1..3 {
        if offdiag_ratio[k] > offdiag_ratio[worst] {
            worst = k;
        }
    }
    let max_offdiag_ratio = offdiag_ratio[worst];
    let mean = crate::covariance::mean(foot.samples());
    let scale = max_diag.sqrt();
    let mean_ratio = if scale > 0.0 {
        mean[1].abs().max(mean[2].abs()) / scale
    } else {
        0.0
    };
    Ok(DiagonalityCheck {
        a: spec.a.clone(),
        b: spec.b.clone(),
        offdiag_ratio,
        max_offdiag_ratio,
        worst_entry: entries[worst],
        mean_ratio,
        pass: max_offdiag_ratio <= DIAGONALITY_TOLERANCE && mean_ratio <= DIAGONALITY_TOLERANCE,
    })
}
