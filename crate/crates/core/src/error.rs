use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library. Variants are grouped by the kind of failure
/// rather than by module, so callers (the CLI in particular) can map them to
/// exit codes without knowing which operation produced them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("parse error at row {row}, column {column}: cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("duplicate curve key (subject {subject_id:?}, occasion {occasion_id:?}, curve {curve_id:?})")]
    DuplicateKey {
        subject_id: String,
        occasion_id: String,
        curve_id: String,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point {point} lies outside the source domain [{lo}, {hi}]")]
    Domain { point: f64, lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rank deficient system: {0}")]
    Rank(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("landmark not found in window [{lo}, {hi}]: {reason}")]
    LandmarkNotFound { lo: f64, hi: f64, reason: String },

    #[error("landmark {time} is not on the grid (nearest point {nearest}, tolerance {tolerance})")]
    LandmarkGrid { time: f64, nearest: f64, tolerance: f64 },

    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    #[error("within-subject level is unidentifiable: every subject has a single curve")]
    WithinUnidentifiable,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("incomplete design: {0}")]
    IncompleteDesign(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("covariance matrix is not positive semi-definite: {0}")]
    Covariance(String),

    #[error("orthonormalization failed: {0}")]
    Orthonormalization(String),

    #[error("join error: subjects missing from the clinical table: {}", .0.join(", "))]
    Join(Vec<String>),

    #[error("replication {replication} (seed {seed}) of scenario {scenario:?} failed: {source}")]
    Replication {
        scenario: String,
        replication: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// An I/O failure on `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
