use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-mean-reverting lag coefficient c = {0} (requires c < 1)")]
    NotMeanReverting(f64),

    #[error("series is too short: {len} observations, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    /// The portfolio path is constant over the window, so the lag design is rank zero.
    #[error("degenerate portfolio: centered lagged series has zero norm")]
    DegeneratePortfolio,

    /// Residuals vanish and the likelihood is unbounded below.
    #[error("exact fit: zero residual variance")]
    ExactFitDegenerate,

    #[error("theta undefined: |1 - c| = {0:e} below threshold")]
    ThetaUndefined(f64),

    #[error("gamma too large: discriminant {0:e} is negative")]
    GammaTooLarge(f64),

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no feasible fit: every restart failed ({0})")]
    NoFeasibleFit(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported format version {found} (max supported {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("malformed document: {e}"))
    }
}
