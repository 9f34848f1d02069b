use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported for world kind {kind}: {what}")]
    UnsupportedKind { kind: &'static str, what: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("no tape recorded (graph already consumed by a previous backward)")]
    MissingTape,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("training diverged in {stage} at step {step}: loss {loss}")]
    Diverged { stage: String, step: usize, loss: f64 },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}
