use thiserror::Error;

pub type AdResult<T> = Result<T, AdError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: invalid input shape {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: &'static str },

    #[error("array rank of shape {shape:?} exceeds 3")]
    Rank { shape: Vec<usize> },

    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),

    #[error("{0}")]
    Invalid(String),
}
