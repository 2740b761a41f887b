use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss does not depend on any tensor that requires grad")]
    NotTracked,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{0}` is already registered")]
    DuplicateParam(String),

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("function is not deterministic under a fixed seed ({first} != {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("adapters were supplied without a latent sample")]
    MissingLatent,

    #[error("prompt point ({row}, {col}) lies outside the {size}x{size} image")]
    PointOutOfBounds { row: usize, col: usize, size: usize },

    #[error("mask is not binary (found value {0})")]
    NonBinaryMask(f64),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("backbone parameters must be registered before freezing")]
    BackboneNotRegistered,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("checkpoint {path}: unsupported format (bad magic or version)")]
    CheckpointVersion { path: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed grid header in {}", .0.display())]
    MalformedHeader(PathBuf),

    #[error("example `{id}`: {detail}")]
    ExampleShape { id: String, detail: String },

    #[error("manifest {}: {reason}", .path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("I/O error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for NaN/Inf aborts raised anywhere in the numeric core.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    /// True for problems with input data, manifests, checkpoints or files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Checkpoint { .. }
                | Error::CheckpointVersion { .. }
                | Error::MissingFile(_)
                | Error::MalformedHeader(_)
                | Error::ExampleShape { .. }
                | Error::Manifest { .. }
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Empty(_)
                | Error::NonBinaryMask(_)
        )
    }
}
