use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("buffer size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("incompatible inputs: {0}")]
    DimensionMismatch(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("insufficient correspondences: need at least {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },

    #[error("no consensus: best hypothesis kept {inliers} inliers, need {needed}")]
    NoConsensus { inliers: usize, needed: usize },

    #[error("no valid plane found after {0} iterations")]
    NoPlane(usize),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid synthesis plan: {0}")]
    InvalidPlan(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: file length {len} is not a multiple of 16 bytes")]
    MalformedLength { path: PathBuf, len: u64 },

    #[error("manifest: {0}")]
    Manifest(#[from] ManifestError),

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Manifest validation failures, each with a stable code for the CLI.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("E101 missing calibration")]
    MissingCalibration,
    #[error("E102 calibration given more than once")]
    DuplicateCalibration,
    #[error("E103 timestamps not strictly increasing at frame {0}")]
    NonMonotoneTimestamp(usize),
    #[error("E104 frame {frame}: pose index {index} out of range ({available} poses)")]
    PoseIndex {
        frame: usize,
        index: usize,
        available: usize,
    },
    #[error("E105 missing poses file")]
    MissingPoses,
    #[error("E106 manifest contains no frames")]
    NoFrames,
}

impl ManifestError {
    pub fn code(&self) -> &'static str {
        match self {
            ManifestError::MissingCalibration => "E101",
            ManifestError::DuplicateCalibration => "E102",
            ManifestError::NonMonotoneTimestamp(_) => "E103",
            ManifestError::PoseIndex { .. } => "E104",
            ManifestError::MissingPoses => "E105",
            ManifestError::NoFrames => "E106",
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
