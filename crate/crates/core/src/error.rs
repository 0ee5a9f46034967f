use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not satisfy its shape rule.
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version {found} is not supported (expected {expected}); re-export it with a matching build or retrain")]
    Version { found: u32, expected: u32 },
    #[error("non-finite {loss} loss in stage {stage} at step {step}")]
    NonFinite {
        stage: u8,
        step: usize,
        loss: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    })
}
