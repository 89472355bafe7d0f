//! Text formats: trajectory and measurement dumps (CSV), and the basis,
//! ground-truth and calibration documents (JSON).

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::cca::CalibrationResult;
use crate::error::{Error, Result};
use crate::kinematics::{AngularVelocitySeries, Frame, Joint, JointTrajectory};
use crate::optimizer::OptimizeOutcome;
use crate::rotation::matrix_to_euler;
use crate::sim::GroundTruth;

pub const TRAJECTORY_HEADER: [&str; 7] = [
    "t",
    "theta_hip",
    "theta_thigh",
    "theta_calf",
    "dtheta_hip",
    "dtheta_thigh",
    "dtheta_calf",
];

pub const MEASUREMENT_HEADER: [&str; 5] = ["t", "wx", "wy", "wz", "frame"];

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str, what: &'static str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Parse {
        what,
        reason: format!("`{field}` is not a number"),
    })
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str], what: &'static str) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            what,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(())
}

pub fn write_trajectory(traj: &JointTrajectory, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for i in 0..traj.len() {
        let mut row = vec![fmt_f64(traj.time()[i])];
        row.extend(Joint::ALL.map(|j| fmt_f64(traj.theta(j)[i])));
        row.extend(Joint::ALL.map(|j| fmt_f64(traj.dtheta(j)[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(input: impl Read) -> Result<JointTrajectory> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &TRAJECTORY_HEADER, "trajectory dump")?;
    let mut time = Vec::new();
    let mut theta: [Vec<f64>; 3] = Default::default();
    let mut dtheta: [Vec<f64>; 3] = Default::default();
    for record in r.records() {
        let record = record?;
        if record.len() != 7 {
            return Err(Error::Parse {
                what: "trajectory dump",
                reason: format!("row has {} fields, expected 7", record.len()),
            });
        }
        time.push(parse_f64(&record[0], "trajectory dump")?);
        for j in 0..3 {
            theta[j].push(parse_f64(&record[1 + j], "trajectory dump")?);
            dtheta[j].push(parse_f64(&record[4 + j], "trajectory dump")?);
        }
    }
    JointTrajectory::new(time, theta, dtheta)
}

pub fn write_measurements(series: &AngularVelocitySeries, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MEASUREMENT_HEADER)?;
    let frame = series.frame().as_str();
    for (t, s) in series.time().iter().zip(series.samples()) {
        w.write_record([fmt_f64(*t), fmt_f64(s[0]), fmt_f64(s[1]), fmt_f64(s[2]), frame.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measurements(input: impl Read) -> Result<AngularVelocitySeries> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &MEASUREMENT_HEADER, "measurement dump")?;
    let mut time = Vec::new();
    let mut samples = Vec::new();
    let mut frame = None;
    for record in r.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::Parse {
                what: "measurement dump",
                reason: format!("row has {} fields, expected 5", record.len()),
            });
        }
        time.push(parse_f64(&record[0], "measurement dump")?);
        samples.push(Vector3::new(
            parse_f64(&record[1], "measurement dump")?,
            parse_f64(&record[2], "measurement dump")?,
            parse_f64(&record[3], "measurement dump")?,
        ));
        let row_frame: Frame = record[4].trim().parse()?;
        if *frame.get_or_insert(row_frame) != row_frame {
            return Err(Error::Parse {
                what: "measurement dump",
                reason: "rows mix frames".into(),
            });
        }
    }
    let frame = frame.ok_or(Error::Parse {
        what: "measurement dump",
        reason: "no rows".into(),
    })?;
    AngularVelocitySeries::new(time, samples, frame)
}

/// Ground-truth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    /// `[γ_x, β_y, α_z]`, degrees.
    pub euler_deg: [f64; 3],
    pub t_d_s: f64,
}

impl From<&GroundTruth> for TruthDocument {
    fn from(truth: &GroundTruth) -> Self {
        Self {
            euler_deg: truth.euler_deg(),
            t_d_s: truth.time_offset,
        }
    }
}

impl TruthDocument {
    pub fn to_truth(&self) -> Result<GroundTruth> {
        GroundTruth::from_euler_deg(self.euler_deg, self.t_d_s)
    }
}

/// Optimizer result export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDocument {
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    pub f: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub rho: f64,
    pub kappa_final: f64,
    pub iterations: usize,
    pub kappa_history: Vec<f64>,
}

impl BasisDocument {
    pub fn from_outcome(outcome: &OptimizeOutcome) -> Self {
        let spec = &outcome.spec;
        Self {
            a: spec.a.clone(),
            b: spec.b.clone(),
            f: spec.frequency,
            t: spec.period,
            n: spec.harmonics(),
            rho: spec.calf_share,
            kappa_final: outcome.kappa,
            iterations: outcome.iterations,
            kappa_history: outcome.kappa_history.clone(),
        }
    }

    /// Spec with the given stance; the document does not carry one.
    pub fn to_spec(&self, stance: [f64; 3]) -> Result<BasisSpec> {
        if self.a.len() != self.n {
            return Err(Error::Parse {
                what: "basis document",
                reason: format!("N = {} but A has {} entries", self.n, self.a.len()),
            });
        }
        BasisSpec::new(self.a.clone(), self.b.clone(), self.f, self.t)?
            .with_calf_share(self.rho)?
            .with_stance(stance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub t_d_s: f64,
    pub euler_deg: [f64; 3],
    /// Row-major.
    pub rotation_matrix: [f64; 9],
    pub correlation: f64,
    pub condition_number: f64,
    pub scan: Vec<[f64; 2]>,
}

impl From<&CalibrationResult> for CalibrationReport {
    fn from(result: &CalibrationResult) -> Self {
        let r = &result.rotation;
        Self {
            t_d_s: result.time_offset,
            euler_deg: matrix_to_euler(r),
            rotation_matrix: row_major(r),
            correlation: result.correlation,
            condition_number: result.condition_number,
            scan: result.offset_scan.iter().map(|&(t, c)| [t, c]).collect(),
        }
    }
}

pub fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::eval_basis;

    #[test]
    fn trajectory_round_trip_is_exact() {
        let spec = BasisSpec::new(vec![0.7, 0.2], vec![1.1, -0.4], std::f64::consts::PI, 2.0)
            .unwrap()
            .with_stance([0.0, 1.75, -1.75])
            .unwrap();
        let traj = eval_basis(&spec, &spec.period_grid(100.0)).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,theta_hip,theta_thigh,theta_calf,dtheta_hip,dtheta_thigh,dtheta_calf\n"));
        assert_eq!(read_trajectory(buf.as_slice()).unwrap(), traj);
    }

    #[test]
    fn measurement_round_trip_is_exact() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 / 500.0).collect();
        let s = t.iter().map(|x| Vector3::new(x.sin(), 1.0 / 3.0, -x)).collect();
        let series = AngularVelocitySeries::new(t, s, Frame::FootIMU).unwrap();
        let mut buf = Vec::new();
        write_measurements(&series, &mut buf).unwrap();
        assert_eq!(read_measurements(buf.as_slice()).unwrap(), series);
    }

    #[test]
    fn bad_header_is_rejected() {
        let text = "t,a,b\n0,1,2\n";
        assert!(matches!(read_trajectory(text.as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(read_measurements(text.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn mixed_frames_are_rejected() {
        let text = "t,wx,wy,wz,frame\n0,1,2,3,FootIMU\n0.1,1,2,3,FootKinematic\n";
        assert!(read_measurements(text.as_bytes()).is_err());
    }

    #[test]
    fn basis_document_field_names() {
        let doc = BasisDocument {
            a: vec![1.0],
            b: vec![2.0],
            f: 3.0,
            t: 4.0,
            n: 1,
            rho: 0.0,
            kappa_final: 1.1,
            iterations: 7,
            kappa_history: vec![2.0, 1.1],
        };
        let v: serde_json::Value = serde_json::to_value(&doc).unwrap();
        for key in ["A", "B", "f", "T", "N", "rho", "kappa_final", "iterations", "kappa_history"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let spec = doc.to_spec([0.0; 3]).unwrap();
        assert_eq!(spec.a, vec![1.0]);
    }
}
