use thiserror::Error;

/// Library-wide error type.
///
/// The three variants deliberately mirror how a front end should report
/// failures: configuration and data problems are user-fixable (bad column
/// names, malformed cells, invalid hyperparameters), while estimation
/// failures arise from the numbers themselves (rank deficiency, weak
/// instruments, degenerate folds).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, inconsistent options.
    #[error("config: {0}")]
    Config(String),
    /// Invalid or malformed input data.
    #[error("data: {0}")]
    Data(String),
    /// Estimation failed on valid inputs.
    #[error("estimation: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
