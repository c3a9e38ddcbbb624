use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report. Messages carry the offending
/// layer or tensor name so archive problems can be located quickly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {context}: {message}")]
    Json { context: String, message: String },

    #[error("size mismatch for tensor `{name}`: shape {shape:?} needs {expected} values, found {found}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("invalid shape for tensor `{name}`: {reason}")]
    InvalidShape { name: String, reason: String },

    #[error("non-finite weight in tensor `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("dangling reference: layer `{layer}` refers to missing {what} `{target}`")]
    DanglingReference {
        layer: String,
        what: &'static str,
        target: String,
    },

    #[error("unreferenced tensor `{0}` is not used by any layer")]
    UnreferencedTensor(String),

    #[error("invalid tensor name `{0}`")]
    InvalidTensorName(String),

    #[error("cyclic graph: layers {0:?} form a cycle")]
    CyclicGraph(Vec<String>),

    #[error("invalid graph at layer `{layer}`: {reason}")]
    InvalidGraph { layer: String, reason: String },

    #[error("add channel mismatch at layer `{layer}`: inputs have {left} and {right} channels")]
    AddChannelMismatch {
        layer: String,
        left: String,
        right: String,
    },

    #[error("shape mismatch at layer `{layer}`: {reason}")]
    ShapeMismatch { layer: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("coupling group violation: {0}")]
    CouplingGroup(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid rate {rate} for `{layer}`: rates must lie in [0, 1)")]
    InvalidRate { layer: String, rate: f64 },

    #[error("no pruning rate resolves for layer `{0}`")]
    MissingRate(String),

    #[error("conflicting rates inside coupling group {group:?}: {detail}")]
    RateConflict { group: Vec<String>, detail: String },

    #[error("missing score row for layer `{0}`")]
    MissingScores(String),

    #[error("plan/archive mismatch: {0}")]
    PlanMismatch(String),

    #[error("index {index} out of range for `{layer}` with {len} entries (stale plan?)")]
    IndexOutOfRange {
        layer: String,
        index: usize,
        len: usize,
    },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("s ≥ 2 required, got {0} samples")]
    TooFewSamples(usize),

    #[error("zero variance input to correlate")]
    ZeroVariance,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("gram matrix is not positive semi-definite (min eigenvalue {0:e}); check the kernel width")]
    NotPositiveDefinite(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(context: impl Into<String>, err: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            message: err.to_string(),
        }
    }
}
