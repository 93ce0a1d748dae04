use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: input {value} outside domain")]
    Domain { op: &'static str, value: f64 },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: node {node} references later node {input} (cycle)")]
    Cycle { node: usize, input: usize },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask plan leaves no visible tokens")]
    NothingVisible,

    #[error("masked voxel set is empty; the masked MSE term is undefined")]
    EmptyMask,

    #[error("no pixel has a non-zero spectrum; the SAM term is undefined")]
    NoValidPixels,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("non-finite gradient for parameter '{param}' at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("non-finite loss at step {step}; mask plan: {plan}")]
    NonFiniteLoss { step: usize, plan: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerical pipeline (as opposed to bad input data).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Domain { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NoValidPixels
        )
    }
}
