//! Error type shared by every module of the engine.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("asset covariance Sigma*Sigma' is not positive definite at t = {time} (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    SingularCovariance { time: f64, pivot: f64, threshold: f64 },

    #[error("horizon must be positive, got {0}")]
    NonpositiveHorizon(f64),

    #[error("risk sensitivity theta must be non-negative, got {0}")]
    NegativeTheta(f64),

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("Riccati solution blew up near t = {time} (norm {norm:.3e})")]
    BlowUp { time: f64, norm: f64 },

    #[error("Q lost positive semidefiniteness at t = {time} (min eigenvalue {min_eig:.3e})")]
    EigenvalueViolation { time: f64, min_eig: f64 },

    #[error("{what}: the two representations disagree by {diff:.3e}")]
    RepresentationMismatch { what: String, diff: f64 },

    #[error(
        "saddle violation: h-side {violation_h:.3e}, gamma-side {violation_gamma:.3e} (tolerance {tolerance:.3e})"
    )]
    SaddleViolation {
        violation_h: f64,
        violation_gamma: f64,
        tolerance: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite state on path {path} at step {step}")]
    NonfiniteState { path: usize, step: usize },

    #[error("bundle was simulated under {got}, operation requires {expected}")]
    MeasureMismatch { expected: String, got: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dates not strictly increasing at line {line}")]
    NonMonotoneDates { line: usize },

    #[error("regressor matrix is rank deficient (rank {rank} < {required})")]
    RankDeficient { rank: usize, required: usize },

    #[error("benchmark weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("KN and FEED routes differ by {diff:.3e} in {metric}")]
    EquivalenceFailure { metric: String, diff: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI's `ERROR <code>:` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::NonpositiveHorizon(_) => "NonpositiveHorizon",
            Error::NegativeTheta(_) => "NegativeTheta",
            Error::TimeOutOfRange { .. } => "TimeOutOfRange",
            Error::BlowUp { .. } => "BlowUp",
            Error::EigenvalueViolation { .. } => "EigenvalueViolation",
            Error::RepresentationMismatch { .. } => "RepresentationMismatch",
            Error::SaddleViolation { .. } => "SaddleViolation",
            Error::Config(_) => "ConfigError",
            Error::NonfiniteState { .. } => "NonfiniteState",
            Error::MeasureMismatch { .. } => "MeasureMismatch",
            Error::Parse { .. } => "ParseError",
            Error::Schema(_) => "SchemaError",
            Error::NonMonotoneDates { .. } => "NonMonotoneDates",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::WeightSum(_) => "WeightSumError",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::EquivalenceFailure { .. } => "EquivalenceFailure",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
