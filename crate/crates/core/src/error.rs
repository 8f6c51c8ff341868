use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `p(x) > 0` where `q(x) = 0`.
    #[error("KL divergence is infinite: p has mass at index {index} where q is zero")]
    InfiniteDivergence { index: usize },

    #[error("capacity exceeded: {what} needs {needed}, limit is {limit}")]
    Capacity {
        what: &'static str,
        needed: f64,
        limit: f64,
    },

    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
