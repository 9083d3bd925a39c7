use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix has numerical rank zero")]
    RankZero,

    #[error("matrix is rank deficient (rank {rank}, need {required})")]
    RankDeficient { rank: usize, required: usize },

    #[error("Cayley system (I + tau/2 H) is singular for tau = {tau}")]
    CurveSingular { tau: f64 },

    #[error("class {label} has fewer than two members, no positive can be drawn")]
    InsufficientClass { label: i64 },

    #[error("all samples share one class, no negative can be drawn")]
    NoNegatives,

    #[error("sample index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("need more than {required} samples, dataset has {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("initial embedding is degenerate (mean squared norm is zero)")]
    DegenerateInit,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: empty input")]
    EmptyInput { path: PathBuf },

    #[error("format error: {0}")]
    Format(String),

    #[error("linear algebra backend failed: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::RankZero => "RankZero",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::CurveSingular { .. } => "CurveSingular",
            Error::InsufficientClass { .. } => "InsufficientClass",
            Error::NoNegatives => "NoNegatives",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::DegenerateInit => "DegenerateInit",
            Error::Parse { .. } => "ParseError",
            Error::EmptyInput { .. } => "EmptyInput",
            Error::Format(_) => "FormatError",
            Error::Backend(_) => "BackendError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
