use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape; run a new forward pass first")]
    BackwardTwice,

    #[error("normalize_power: latent row {0} is all zeros")]
    ZeroSignal(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("selector `{0}` matches no parameter")]
    EmptySelector(String),

    #[error("unknown decoder id {0}")]
    UnknownDecoder(u8),

    #[error("distillation target must be detached, but it is flagged trainable")]
    TeacherTrainable,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {detail}")]
    Ppm { path: PathBuf, detail: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss in {regimen} phase {phase}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        regimen: String,
        phase: u8,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
