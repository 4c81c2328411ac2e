use thiserror::Error;

/// Errors raised by the estimation pipeline and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),
    #[error("column `{0}` has zero variance")]
    DegenerateColumn(String),
    #[error("kernel weights of conditioning row {row} sum to zero")]
    ZeroMassRow { row: usize },
    #[error("kernel mass at query point is zero")]
    ZeroMassQuery,
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("treatment arm {arm} is empty")]
    DegenerateTreatment { arm: u8 },
    #[error("invalid p_tilde: {0}")]
    InvalidPTilde(String),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("selection search over {p_tilde} covariates exceeds the cap of {cap}")]
    SearchTooLarge { p_tilde: usize, cap: usize },
    #[error("estimated propensity {value} at observation {index} is on the boundary of (0,1)")]
    PropensityBoundary { index: usize, value: f64 },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("cannot parse value at row {row}, column `{col}`: {value:?}")]
    ParseError { row: usize, col: String, value: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::InvalidPTilde(_) | Error::SearchTooLarge { .. } => {
                ErrorClass::Usage
            }
            Error::InvalidBandwidth(_)
            | Error::ZeroMassRow { .. }
            | Error::ZeroMassQuery
            | Error::PropensityBoundary { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
