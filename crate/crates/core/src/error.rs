use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The metric or its standard error is undefined or zero on a block.
    #[error("degenerate block: {0}")]
    DegenerateBlock(String),
    #[error("standard error is zero; cannot studentize")]
    ZeroSigma,
    #[error("all samples are equal; bandwidth is undefined")]
    AllSamplesEqual,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("block {got} arrived after block {last}; blocks must be consumed in order")]
    OutOfOrderBlock { got: usize, last: usize },
    #[error("no threshold on the search grid keeps type-1 error at or below {alpha}")]
    CalibrationFailed { alpha: f64 },
}
