use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown variant `{0}` (expected one of: apvt-8-2x-a, apvt-8-2x-b, apvt-16-2x-b, apvt-8-4x-a, apvt-16-4x-a)")]
    UnknownVariant(String),

    #[error("backward already ran on this graph")]
    BackwardConsumed,

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("dataset file {} has length {len}, not a multiple of {record}", path.display())]
    RecordLength { path: PathBuf, len: u64, record: usize },

    #[error("label {label} out of range at record {index}")]
    BadLabel { index: usize, label: u8 },

    #[error("malformed normalization sidecar {}: {reason}", path.display())]
    BadSidecar { path: PathBuf, reason: String },

    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint entry {index} is named `{found}`, model expects `{expected}`")]
    NameMismatch { index: usize, expected: String, found: String },

    #[error("checkpoint entry `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("truncated or malformed checkpoint: {0}")]
    Corrupt(String),

    #[error("check `{name}` failed: {detail}")]
    CheckFailed { name: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
