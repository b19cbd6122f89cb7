//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("input: {0}")]
    Input(String),

    /// Invalid configuration (kernel parameters, grids, command options).
    #[error("config: {0}")]
    Config(String),

    /// A fitted-model contract was violated (empty class, missing state).
    #[error("model: {0}")]
    Model(String),

    /// Numerical failure with the offending context.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Graph node without any edge; the normalized Laplacian is undefined there.
    #[error("node {0} is isolated (degree 0); remove it before building the kernel")]
    IsolatedNode(usize),

    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("axis {axis} out of range for class with dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },

    #[error(
        "degenerate noise variance {value:.3e}; lower the dimension or raise the scree threshold"
    )]
    DegenerateNoise { value: f64 },

    #[error("requested dimension {dim} must stay below the smallest rank bound {bound}")]
    DimensionTooLarge { dim: usize, bound: usize },

    #[error("cluster {index} collapsed (effective size {size:.3e})")]
    ClusterCollapse { index: usize, size: f64 },

    #[error("clustering failed: all {0} restarts collapsed")]
    ClusteringFailed(usize),

    #[error("prediction requires a kernel row against the training samples")]
    MissingKernelRow,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable code for CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Input(_)
            | Error::LengthMismatch { .. }
            | Error::NonFinite(_)
            | Error::IsolatedNode(_)
            | Error::EmptyClass(_)
            | Error::AxisOutOfRange { .. }
            | Error::MissingKernelRow => "input",
            Error::Config(_) | Error::DimensionTooLarge { .. } => "config",
            Error::Model(_) => "model",
            Error::Numeric(_) => "numeric",
            Error::DegenerateNoise { .. } => "degenerate-noise",
            Error::ClusterCollapse { .. } | Error::ClusteringFailed(_) => "cluster-collapse",
            Error::Io(_) => "io",
            Error::Parse { .. } => "parse",
            Error::Serde(_) => "serde",
        }
    }
}
