use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },
    #[error("file truncated: needed {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingData { extra: usize },
    #[error("dimension {name}={value} out of range")]
    ShapeOverflow { name: &'static str, value: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFiniteData { index: usize },
    #[error("layout has {layout} joints but sequence has {sequence}")]
    LayoutMismatch { layout: usize, sequence: usize },
    #[error("invalid skeleton layout: {0}")]
    InvalidLayout(String),
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("vertex {0} has zero degree")]
    IsolatedVertex(usize),
    #[error("K={k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel count {channels} not divisible by {parts}")]
    ChannelSplitError { channels: usize, parts: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("epoch {epoch} outside [0, {total})")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("top-K selection too close to a ranking boundary (relative gap {gap:.3e})")]
    BoundaryDegeneracy { gap: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
