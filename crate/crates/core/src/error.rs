use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("Gram matrix TᵀT is singular or not positive definite (collapsed simplex)")]
    SingularGram,

    #[error("row {row} has non-positive sum {sum:e} and cannot be normalized")]
    ZeroRow { row: usize, sum: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrected probability underflow at instance {instance} ({value:e})")]
    NumericalUnderflow { instance: usize, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training failed at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
