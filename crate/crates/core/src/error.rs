use crate::ot::SinkhornDiagnostics;

/// Errors produced anywhere in the routing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("problem size {rows}x{cols} exceeds the {cap}x{cap} cap of {what}")]
    TooLarge {
        what: &'static str,
        rows: usize,
        cols: usize,
        cap: usize,
    },

    /// The unstabilized Sinkhorn solver produced a non-finite or vanishing
    /// intermediate. No plan is available.
    #[error("sinkhorn overflow after {} iterations", .0.iterations_used)]
    Overflow(Box<SinkhornDiagnostics>),

    /// A transport-plan entry rounded to zero, so the plan cannot give every
    /// selected expert a positive weight.
    #[error("transport plan entry ({row}, {col}) underflowed to zero")]
    Underflow {
        row: usize,
        col: usize,
        diagnostics: Box<SinkhornDiagnostics>,
    },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the arithmetic itself (overflow, underflow, NaN
    /// loss), as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Overflow(_) | Error::Underflow { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
