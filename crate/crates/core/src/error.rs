use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation matrix is not orthonormal (residual {0:.3e})")]
    NotOrthonormal(f64),
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid body model: {0}")]
    BodyModel(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing supervision: {0}")]
    MissingSupervision(&'static str),
    #[error("degenerate point set for Procrustes alignment")]
    DegeneratePoints,
    #[error("sequence too short: need at least {need} frames, got {got}")]
    SequenceTooShort { need: usize, got: usize },
    #[error("archive: {0}")]
    Archive(String),
    #[error("archive version {found} is not supported (expected {expected})")]
    ArchiveVersion { found: u32, expected: u32 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
