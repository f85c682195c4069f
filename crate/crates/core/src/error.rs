use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("derivative check failed for {function} at {point:?}: gap {gap:e}")]
    DerivativeCheckFailed { function: String, point: Vec<f64>, gap: f64 },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("control leaves the admissible box at cell {cell}, component {component}")]
    OutOfBox { cell: usize, component: usize },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("missing derivative: {0}")]
    MissingDerivative(String),

    #[error("direction leaves the control box for every tested rho")]
    DirectionLeavesBox,

    #[error("degenerate drift of the mean constraint at the terminal time: |h| = {0:e}")]
    DegenerateH(f64),

    #[error("singular regression at step {0}")]
    SingularRegression(usize),

    #[error("non-finite backward value at step {0}")]
    NonFiniteBackward(usize),

    #[error("non-finite adjoint value at step {0}")]
    NonFiniteAdjoint(usize),

    #[error("Armijo line search failed {failures} consecutive times at iteration {iteration}")]
    LineSearchStalled { iteration: usize, failures: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), message: message.into() }
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Expr(e) => e.code(),
            Error::Schema { .. } => "SchemaError",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::DerivativeCheckFailed { .. } => "DerivativeCheckFailed",
            Error::UnknownProblem(_) => "UnknownProblem",
            Error::OutOfBox { .. } => "OutOfBox",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::MissingDerivative(_) => "MissingDerivative",
            Error::DirectionLeavesBox => "DirectionLeavesBox",
            Error::DegenerateH(_) => "DegenerateH",
            Error::SingularRegression(_) => "SingularRegression",
            Error::NonFiniteBackward(_) => "NonFiniteBackward",
            Error::NonFiniteAdjoint(_) => "NonFiniteAdjoint",
            Error::LineSearchStalled { .. } => "LineSearchStalled",
            Error::InvalidArgument(_) => "InvalidArgument",
        }
    }

    /// True for errors caused by the input document rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Expr(e) => e.is_parse_error(),
            Error::Schema { .. }
            | Error::DimensionMismatch(_)
            | Error::DerivativeCheckFailed { .. }
            | Error::UnknownProblem(_)
            | Error::OutOfBox { .. }
            | Error::InvalidArgument(_) => true,
            _ => false,
        }
    }
}
