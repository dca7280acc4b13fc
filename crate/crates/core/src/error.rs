use thiserror::Error;

/// Errors produced anywhere in the simulation and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("illegal preparation: {0}")]
    IllegalPreparation(String),

    #[error("invalid state code {0}")]
    InvalidStateCode(u8),

    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("missing source profile for {0}")]
    MissingProfile(String),

    #[error("spectral filter does not overlap the spectrum")]
    FilterDisjoint,

    #[error("nothing sifts: sum of p(S|A)p(A) is zero")]
    NothingSifts,

    #[error("finite-difference step {step:e} underflows at value {value:e}")]
    StepUnderflow { step: f64, value: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
