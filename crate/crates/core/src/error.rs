use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate feature: row {row} of {operand} has zero norm")]
    DegenerateFeature { operand: &'static str, row: usize },

    #[error("invalid value: {0}")]
    Invalid(String),
}
