use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor construction and graph ops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs a different element count than {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: dimension mismatch between {a:?} and {b:?}")]
    Dimension { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("KL divergence is infinite: student probability is 0 at index {index} where the teacher has mass")]
    InfiniteDivergence { index: usize },
    #[error("{what} index {index} out of range for size {size}")]
    Index { what: &'static str, index: usize, size: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mode violation: {0}")]
    ModeViolation(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("mapping error: student neuron {0} has no image")]
    Mapping(usize),
    #[error("frozen teacher parameter changed: {0}")]
    FrozenViolation(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing file {}", .0.display())]
    Missing(PathBuf),
    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    Exists(PathBuf),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// Short stable tag used as a machine-parsable error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::ModeViolation(_) => "mode",
            Error::Degenerate(_) => "degenerate",
            Error::Selection(_) => "selection",
            Error::Mapping(_) => "mapping",
            Error::FrozenViolation(_) => "frozen",
            Error::Diverged { .. } => "diverged",
            Error::Metric(_) => "metric",
            Error::Analysis(_) => "analysis",
            Error::Spec(_) => "spec",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Missing(_) => "missing",
            Error::Exists(_) => "exists",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
