use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
