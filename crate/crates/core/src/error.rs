use thiserror::Error;

/// Errors raised by the solver and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("point {point:?} lies outside the solvency domain")]
    OutOfDomain { point: Vec<f64> },

    #[error("total wealth must be positive, got {0}")]
    NonPositiveWealth(f64),

    #[error("dual utility requires a positive argument, got {0}")]
    NonPositiveArgument(f64),

    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,

    #[error("boundary bounds undefined: {0}")]
    BoundsUndefined(String),

    #[error("grid has no active nodes inside the solvency domain")]
    EmptyActiveSet,

    #[error("cross derivative requires two distinct axes, got {0} twice")]
    SameAxis(usize),

    #[error("negative diffusion coefficient {value} on axis {axis} at {point:?}")]
    NegativeDiffusion {
        axis: usize,
        value: f64,
        point: Vec<f64>,
    },

    #[error("non-finite value at node {node:?} (t = {time})")]
    NonFinite { node: Vec<f64>, time: f64 },

    #[error("trade leaves the solvency region (wealth factor {0})")]
    Insolvent(f64),

    #[error(
        "node {node:?} violates both the buy and sell constraint of asset {asset}; \
         the sampled slice is too noisy there (increase scheme.paths)"
    )]
    InconsistentLabels { node: Vec<f64>, asset: usize },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("grid or time mismatch: {0}")]
    Mismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field: field.to_string(),
        reason: reason.into(),
    }
}
