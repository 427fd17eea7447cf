use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient points: requested {requested}, available {available}")]
    InsufficientPoints { requested: usize, available: usize },
    #[error("degenerate hierarchy: {0}")]
    DegenerateHierarchy(String),
    #[error("at least one click required")]
    NoClicks,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("scene placement failed: {0}")]
    Placement(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
