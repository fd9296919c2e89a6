use std::fmt;

/// Errors raised by model construction, the solvers and the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model or config field failed validation. `path` names the offending field.
    #[error("invalid model at `{path}`: {message}")]
    InvalidModel { path: String, message: String },

    #[error("index {index} out of range for a space of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{what} needs {required} but the budget is {budget}")]
    BudgetExceeded {
        what: &'static str,
        required: u128,
        budget: u128,
    },

    /// KL divergence against a reference that is zero where the argument is not.
    #[error("KL divergence undefined: reference has zero mass at state {state}")]
    KlDomain { state: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Observation with zero probability under the predicted belief.
    #[error("observation {observation} has zero probability under the predicted belief")]
    ImpossibleObservation { observation: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("strategy has no entry for {0}")]
    StrategyGap(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Budget,
    Numeric,
}

impl Error {
    pub(crate) fn invalid(path: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::InvalidModel {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidModel { .. }
            | Error::DimensionMismatch(_)
            | Error::StrategyGap(_)
            | Error::Unsupported(_)
            | Error::KlDomain { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::IndexOutOfRange { .. } => ErrorClass::Config,
            Error::BudgetExceeded { .. } => ErrorClass::Budget,
            Error::Numeric(_) | Error::ImpossibleObservation { .. } => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
