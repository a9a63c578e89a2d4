use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: quaternion norm {norm} outside tolerance")]
    InvalidRotation { norm: f64 },

    #[error("degenerate covariance (determinant {det:e})")]
    DegenerateCovariance { det: f64 },

    #[error("point behind camera (depth {depth} <= near plane {near})")]
    BehindCamera { depth: f64, near: f64 },

    #[error("cannot render an empty scene")]
    EmptyScene,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid skinning weights: sum {sum}")]
    InvalidWeights { sum: f64 },

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NanGradient { group: String },

    #[error("optimization diverged at iteration {iteration} (loss {loss:e}, initial {initial:e})")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        checkpoint: Box<crate::params::ParamStore>,
    },

    #[error("guidance unavailable: {0}")]
    GuidanceUnavailable(String),

    #[error("missing forward cache: {0}")]
    MissingCache(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
