use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape { op: &'static str, expected: String, found: String },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("batch norm in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} outside class range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in parameter tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("backward called on non-scalar output with {0} elements")]
    NonScalarLoss(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, found: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.into(),
        found: format!("{found:?}"),
    }
}
