use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no interactions")]
    NoInteractions,
    #[error("empty result after {k}-core filtering")]
    EmptyAfterFiltering { k: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite {what} at row {row}, column {col}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("non-finite intermediate at reverse step {step}")]
    NonFiniteReverseStep { step: usize },
    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },
    #[error("training diverged at epoch {epoch}: non-finite {component} loss")]
    Diverged {
        epoch: usize,
        component: &'static str,
    },
    #[error("triplet sampling failed: {0}")]
    Sampling(String),
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

pub type Result<T> = core::result::Result<T, Error>;
