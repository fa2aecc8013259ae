use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not fit the operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is outside its valid domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// NaN or infinity where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("autograd: {0}")]
    Autograd(String),

    /// Class index, target or similar index outside its range.
    #[error("out of range: {0}")]
    Range(String),

    /// Malformed SMAT/SMCK/manifest content.
    #[error("format: {0}")]
    Format(String),

    /// Metric undefined for the given input.
    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by numerics (exit code 2 in the CLI).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
