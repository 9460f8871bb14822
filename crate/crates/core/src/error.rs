use std::io;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A RIFF/WAVE container that cannot be parsed.
    #[error("malformed WAV: chunk '{chunk}': {reason}")]
    Format { chunk: String, reason: String },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// User-supplied data (manifests, span lists, counts) failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter '{0}' has no gradient; run backward before stepping")]
    MissingGrad(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(chunk: &str, reason: impl Into<String>) -> Self {
        Error::Format {
            chunk: chunk.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Prefix the message with `ctx` (a file or source id), keeping the kind.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            Error::Format { chunk, reason } => Error::Format {
                chunk,
                reason: format!("{ctx}: {reason}"),
            },
            Error::UnsupportedEncoding(m) => Error::UnsupportedEncoding(format!("{ctx}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{ctx}: {m}")),
            Error::MissingGrad(m) => Error::MissingGrad(m),
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
