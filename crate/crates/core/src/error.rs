use thiserror::Error;

/// Failure modes shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("index or count out of range: {0}")]
    Range(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("step-size failure: {0}")]
    StepSize(String),
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: &'static str, detail: String },
    #[error("optimization aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
