use thiserror::Error;

use crate::model::MethodKind;

/// Errors produced by estimation, sampling and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {context} at row {row}")]
    NonFinite { context: &'static str, row: usize },

    #[error("method {method} requires {field}")]
    MissingField {
        method: MethodKind,
        field: &'static str,
    },

    #[error("intercept bisection failed for target {target}: bracket [{lo}, {hi}] gives means [{mean_lo}, {mean_hi}]")]
    Bisection {
        target: f64,
        lo: f64,
        hi: f64,
        mean_lo: f64,
        mean_hi: f64,
    },

    #[error("too few units ({got}) to estimate {what}; need at least {need}")]
    TooFewUnits {
        what: &'static str,
        got: usize,
        need: usize,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
