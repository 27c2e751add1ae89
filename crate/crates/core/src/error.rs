use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    /// Mean different-class distance does not exceed mean same-class distance
    /// by the required margin, so the distance-ratio loss is not usable.
    #[error("degenerate distance-loss denominator (D - S = {gap:e})")]
    DegenerateDenominator { gap: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid reference set: {0}")]
    InvalidReference(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad inputs or configuration rather than a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::InvalidReference(_)
                | Error::Parse { .. }
                | Error::Shape(_)
                | Error::InvalidBatch(_)
        )
    }
}
