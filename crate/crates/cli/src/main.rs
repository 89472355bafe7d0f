//! `footcal`: optimise excitation trajectories, simulate foot IMUs,
//! calibrate them and run the comparison matrix.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use footcal::harness::{diagonality_suite, DiagonalityCheck, DIAGONALITY_TOLERANCE};
use footcal::io::{
    read_measurements, read_trajectory, write_measurements, write_trajectory, BasisDocument, CalibrationReport,
    TruthDocument,
};
use footcal::{
    calibrate, initial_spec, optimize, rotation_error, run_matrix, simulate_imu, trajectory_to_foot_velocity,
    CalibrationOptions, ExperimentConfig, Foot, GroundTruth, Motion, NoiseModel,
};

#[derive(Parser)]
#[command(name = "footcal", version, about = "Foot-mounted IMU calibration lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise an excitation trajectory for one foot.
    Optimize(OptimizeArgs),
    /// Produce kinematic and IMU measurement dumps for a trajectory.
    Simulate(SimulateArgs),
    /// Estimate rotation and time offset from two measurement dumps.
    Calibrate(CalibrateArgs),
    /// Run the foot x motion x noise x seed experiment matrix.
    Matrix(MatrixArgs),
    /// Check foot-covariance diagonality over random harmonic specs.
    #[command(name = "theorem-check")]
    Diagonality(DiagonalityArgs),
}

#[derive(clap::Args)]
struct OptimizeArgs {
    /// Experiment config (JSON); its optimizer and geometry are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimizer seed, replacing the config's.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "FL")]
    foot: Foot,
    /// Output directory for basis.json and trajectory.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Joint trajectory dump to simulate.
    #[arg(long, conflicts_with = "motion")]
    trajectory: Option<PathBuf>,
    /// Baseline gait to simulate instead of a trajectory dump.
    #[arg(long)]
    motion: Option<Motion>,
    /// Ground-truth document with `euler_deg` and `t_d_s`.
    #[arg(long, conflicts_with = "euler")]
    truth: Option<PathBuf>,
    /// Mounting rotation as `roll,pitch,yaw` in degrees.
    #[arg(long, allow_hyphen_values = true)]
    euler: Option<String>,
    /// Time offset in seconds, used with --euler.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    offset: f64,
    /// Gyro noise density, deg/s/sqrt(Hz).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Foot whose geometry and configured truth are used.
    #[arg(long, default_value = "FL")]
    foot: Foot,
    /// Output directory for foot.csv, imu.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// IMU measurement dump.
    #[arg(long)]
    imu: PathBuf,
    /// Kinematic measurement dump.
    #[arg(long = "foot")]
    foot: PathBuf,
    /// Offset search range in seconds; defaults to the config's.
    #[arg(long)]
    range: Option<f64>,
    /// Return the transpose of the fitted rotation.
    #[arg(long)]
    literal_inverse: bool,
    /// Ground truth to score the estimate against.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Hardware,
}

#[derive(clap::Args)]
struct MatrixArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Run seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated noise densities.
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    /// Comma-separated motions (optimized/a2i, walk, spin, wave).
    #[arg(long, value_delimiter = ',')]
    motion: Option<Vec<Motion>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DiagonalityArgs {
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    max_harmonics: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500.0)]
    rate: f64,
    /// Offset range fixing the base frequency and period.
    #[arg(long, default_value_t = 0.25)]
    range: f64,
    /// Result document; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Lib(footcal::Error),
    File(PathBuf, std::io::Error),
    Usage(String),
}

impl From<footcal::Error> for Failure {
    fn from(e: footcal::Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl Failure {
    fn document(&self) -> serde_json::Value {
        let (kind, message) = match self {
            Failure::Lib(e) => (e.kind(), e.to_string()),
            Failure::File(path, e) => ("io", format!("{}: {e}", path.display())),
            Failure::Usage(m) => ("usage", m.clone()),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message } })
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::File(path.to_path_buf(), e))
}

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let config: ExperimentConfig = match path {
        Some(p) => serde_json::from_reader(open(p)?)?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut f, value)?;
            writeln!(f)?;
            f.flush()?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn parse_euler(text: &str) -> CliResult<[f64; 3]> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--euler expects three numbers, got `{text}`")))?;
    values
        .try_into()
        .map_err(|_| Failure::Usage(format!("--euler expects three numbers, got `{text}`")))
}

fn cmd_optimize(args: OptimizeArgs) -> CliResult<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.optimizer.seed = seed;
    }
    let geometry = config.geometry_for(args.foot);
    let opt = config.optimizer_for(args.foot);
    let outcome = optimize(&initial_spec(&opt, geometry)?, &opt, geometry)?;

    fs::create_dir_all(&args.out)?;
    write_json(&BasisDocument::from_outcome(&outcome), Some(&args.out.join("basis.json")))?;
    let record = config.motion_trajectory(Motion::Optimized, Some(&outcome.spec))?;
    write_trajectory(&record, BufWriter::new(File::create(args.out.join("trajectory.csv"))?))?;

    write_json(
        &serde_json::json!({
            "foot": args.foot,
            "kappa": outcome.kappa,
            "iterations": outcome.iterations,
            "converged": outcome.converged,
            "feasible": outcome.feasible,
        }),
        None,
    )
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let config = load_config(args.config.as_deref())?;
    let traj = match (&args.trajectory, args.motion) {
        (Some(path), _) => read_trajectory(open(path)?)?,
        (None, Some(Motion::Optimized)) => {
            return Err(Failure::Usage(
                "the optimized motion needs --trajectory (see `footcal optimize`)".into(),
            ))
        }
        (None, Some(motion)) => config.motion_trajectory(motion, None)?,
        (None, None) => return Err(Failure::Usage("give --trajectory or --motion".into())),
    };
    let truth = match (&args.truth, &args.euler) {
        (Some(path), _) => {
            let doc: TruthDocument = serde_json::from_reader(open(path)?)?;
            doc.to_truth()?
        }
        (None, Some(euler)) => GroundTruth::from_euler_deg(parse_euler(euler)?, args.offset)?,
        (None, None) => config.truth_for(args.foot)?.to_truth()?,
    };

    let foot = trajectory_to_foot_velocity(config.geometry_for(args.foot), &traj)?;
    let rate = 1.0 / foot.uniform_interval()?;
    let imu = simulate_imu(&foot, &truth, &NoiseModel::new(args.noise, rate, args.seed)?)?;

    fs::create_dir_all(&args.out)?;
    write_measurements(&foot, BufWriter::new(File::create(args.out.join("foot.csv"))?))?;
    write_measurements(&imu, BufWriter::new(File::create(args.out.join("imu.csv"))?))?;
    write_json(&TruthDocument::from(&truth), Some(&args.out.join("truth.json")))
}

#[derive(Serialize)]
struct TruthScore {
    re_deg: f64,
    geodesic_deg: f64,
    gimbal_lock: bool,
    td_error_ms: f64,
}

#[derive(Serialize)]
struct CalibrationOutput {
    #[serde(flatten)]
    report: CalibrationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth_error: Option<TruthScore>,
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult<()> {
    let config = load_config(args.config.as_deref())?;
    let imu = read_measurements(open(&args.imu)?)?;
    let foot = read_measurements(open(&args.foot)?)?;
    let rate = 1.0 / foot.uniform_interval()?;
    let mut options = CalibrationOptions::for_rate(rate, args.range.unwrap_or(config.optimizer.offset_range));
    options.literal_inverse = args.literal_inverse;
    let result = calibrate(&imu, &foot, &options)?;

    let truth_error = match &args.truth {
        Some(path) => {
            let doc: TruthDocument = serde_json::from_reader(open(path)?)?;
            let err = rotation_error(&result.rotation, doc.euler_deg)?;
            Some(TruthScore {
                re_deg: err.re_deg,
                geodesic_deg: err.geodesic_deg,
                gimbal_lock: err.gimbal_lock,
                td_error_ms: (result.time_offset - doc.t_d_s) * 1e3,
            })
        }
        None => None,
    };
    write_json(
        &CalibrationOutput {
            report: CalibrationReport::from(&result),
            truth_error,
        },
        args.out.as_deref(),
    )
}

fn fmt_cell(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn cmd_matrix(args: MatrixArgs) -> CliResult<()> {
    let mut config = match args.preset {
        Some(Preset::Hardware) => ExperimentConfig::hardware_preset(),
        Some(Preset::Default) => ExperimentConfig::default(),
        None => load_config(args.config.as_deref())?,
    };
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(n) = args.seeds {
        config.seeds = (0..n).collect();
    }
    if let Some(noise) = args.noise {
        config.noise_densities = noise;
    }
    if let Some(motions) = args.motion {
        config.motions = motions;
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Failure::Usage("give --out or set output_dir in the config".into()))?;

    let report = run_matrix(&config, Some(&out))?;

    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{:<10} {:>8} {:>5} {:>5} {:>12} {:>8} {:>10} {:>10}",
        "motion", "noise", "rows", "fail", "CN", "CC", "RE[deg]", "|td|[ms]"
    )?;
    for c in &report.summary {
        writeln!(
            stdout,
            "{:<10} {:>8} {:>5} {:>5} {:>12} {:>8} {:>10} {:>10}",
            c.motion.as_str(),
            c.noise_density,
            c.rows,
            c.failures,
            fmt_cell(c.median_cn, 2),
            fmt_cell(c.median_cc, 4),
            fmt_cell(c.median_re_deg, 3),
            fmt_cell(c.median_abs_td_error_ms, 2),
        )?;
    }
    writeln!(stdout, "reports written to {}", out.display())?;
    Ok(())
}

#[derive(Serialize)]
struct DiagonalityDocument<'a> {
    count: usize,
    passed: usize,
    failed: usize,
    tolerance: f64,
    checks: &'a [DiagonalityCheck],
}

/// Returns whether every spec passed.
fn cmd_diagonality(args: DiagonalityArgs) -> CliResult<bool> {
    let checks = diagonality_suite(args.count, args.max_harmonics, args.seed, args.rate, args.range)?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    write_json(
        &DiagonalityDocument {
            count: checks.len(),
            passed: checks.len() - failed,
            failed,
            tolerance: DIAGONALITY_TOLERANCE,
            checks: &checks,
        },
        args.out.as_deref(),
    )?;
    if failed > 0 {
        eprintln!("{failed} of {} specs have a non-diagonal foot covariance", checks.len());
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let doc = Failure::Usage(e.to_string().trim_end().to_string()).document();
            eprintln!("{doc}");
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Optimize(a) => cmd_optimize(a).map(|_| true),
        Command::Simulate(a) => cmd_simulate(a).map(|_| true),
        Command::Calibrate(a) => cmd_calibrate(a).map(|_| true),
        Command::Matrix(a) => cmd_matrix(a).map(|_| true),
        Command::Diagonality(a) => cmd_diagonality(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(failure) => {
            eprintln!("{}", failure.document());
            ExitCode::from(2)
        }
    }
}
