//! Active foot-IMU calibration for legged robots, in simulation.
//!
//! The pipeline generates a leg trajectory whose foot angular-velocity
//! covariance is well conditioned, simulates a foot IMU with an unknown
//! mounting rotation, time offset and gyroscope noise, and recovers the
//! rotation and offset by maximising the trace correlation between the
//! kinematic and measured angular velocities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod basis;
pub mod cca;
pub mod covariance;
pub mod error;
pub mod harness;
pub mod io;
pub mod kinematics;
pub mod optimizer;
pub mod rotation;
pub mod sim;

pub use basis::{derive_schedule, eval_basis, BasisSpec, Schedule};
pub use cca::{
    calibrate, estimate_rotation, estimate_time_offset, shift_series, trace_correlation,
    CalibrationOptions, CalibrationResult, OffsetEstimate, OffsetSearch, TraceCorrelation,
};
pub use covariance::{condition_number, covariance_ff, covariance_set, CovarianceSet};
pub use error::{Error, Result};
pub use harness::{run_matrix, diagonality_suite, ExperimentConfig, Foot, MatrixReport, Motion, ReportRow};
pub use kinematics::{
    foot_angular_velocity, joint_limit_report, trajectory_to_foot_velocity, AngularVelocitySeries,
    Frame, Joint, JointLimits, JointRange, JointTrajectory, LegGeometry,
};
pub use optimizer::{
    initial_spec, loss_gradient, optimize, trajectory_loss, LossBreakdown, OptimizeOutcome,
    OptimizerConfig,
};
pub use rotation::{euler_to_matrix, matrix_to_euler, rotation_error, RotationError};
pub use sim::{baseline_gait, simulate_imu, GaitKind, GaitParams, GroundTruth, NoiseModel};
