use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),
    #[error("forward pass is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
