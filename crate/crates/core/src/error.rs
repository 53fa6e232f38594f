use thiserror::Error;

use crate::params::ParameterVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate axis {axis} (`{name}`): all coordinates equal {value}")]
    DegenerateAxis { axis: usize, name: String, value: f64 },

    #[error("duplicate locations at rows {first} and {second}")]
    DuplicateLocation { first: usize, second: usize },

    #[error(
        "matrix of order {order} is not positive definite (pivot {pivot}) with jitter {jitter:e}; \
         diagonal spans [{min_diag:e}, {max_diag:e}]"
    )]
    NotPositiveDefinite {
        order: usize,
        pivot: usize,
        jitter: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("non-finite value in parameter segment `{segment}`")]
    NonFinite { segment: String },

    #[error("target {value} lies outside the image of the search box in coordinate {coordinate}")]
    OutOfRange { coordinate: usize, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fit failed at outer iteration {iteration}: {source}")]
    FitFailed {
        iteration: usize,
        last_good: Box<ParameterVector>,
        #[source]
        source: Box<Error>,
    },
}
