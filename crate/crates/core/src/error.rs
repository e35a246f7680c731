//! Crate-wide error type with stable CLI exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value rejected in {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("token id {0} outside vocabulary of size {1}")]
    OutOfVocabulary(u32, usize),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("branch provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("optimizer step rejected: {0}")]
    StepRejected(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint/config mismatch on resume: {0}")]
    ResumeMismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed input {path}: {detail}")]
    MalformedInput { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code: 0 ok, 2 io, 3 malformed input,
    /// 4 resume mismatch, 5 missing artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::MalformedInput { .. } | Error::Json(_) | Error::InvalidConfig(_) => 3,
            Error::InvalidScene(_) => 3,
            Error::ResumeMismatch(_) => 4,
            Error::MissingArtifact(_) => 5,
            _ => 1,
        }
    }
}
