use thiserror::Error;

use crate::kinematics::Frame;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported leg geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("series time grids are not aligned")]
    MisalignedGrids,

    #[error("expected a {expected:?} series, got {got:?}")]
    FrameMismatch { expected: Frame, got: Frame },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("{what} is ill-conditioned (singular values {smallest:e} / {largest:e}); the motion does not excite every axis")]
    IllConditioned {
        what: &'static str,
        smallest: f64,
        largest: f64,
    },

    #[error("rotation estimate is rank deficient: no usable excitation along the foot {axis} axis")]
    RankDeficient { axis: char, direction: [f64; 3] },

    #[error("series sample rate {series} Hz does not match noise model rate {model} Hz")]
    SampleRateMismatch { series: f64, model: f64 },

    #[error("time offset {offset} s exceeds what the series supports ({limit} s)")]
    OffsetOutOfRange { offset: f64, limit: f64 },

    #[error("no offset candidate produced a valid correlation")]
    NoValidCandidate,

    #[error("rotation matrix is not a proper rotation: {0}")]
    NotARotation(String),

    #[error("malformed {what}: {reason}")]
    Parse { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::UnsupportedGeometry(_) => "unsupported_geometry",
            Error::InvalidTrajectory(_) => "invalid_trajectory",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::MisalignedGrids => "misaligned_grids",
            Error::FrameMismatch { .. } => "frame_mismatch",
            Error::Asymmetric(_) => "asymmetric_matrix",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::SampleRateMismatch { .. } => "sample_rate_mismatch",
            Error::OffsetOutOfRange { .. } => "offset_out_of_range",
            Error::NoValidCandidate => "no_valid_candidate",
            Error::NotARotation(_) => "not_a_rotation",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
