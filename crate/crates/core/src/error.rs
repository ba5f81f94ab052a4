use std::path::PathBuf;

/// Errors raised anywhere in the recognizer stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("image area {area} px exceeds the cap of {cap} px")]
    InputTooLarge { area: usize, cap: usize },

    #[error("render error: {0}")]
    Render(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{pred} predictions cannot be paired with {label} labels")]
    Pairing { pred: usize, label: usize },

    #[error("WER is undefined for an empty label")]
    EmptyLabel,

    #[error("checkpoint is incompatible; mismatched parameters: {}", paths.join(", "))]
    Incompatible { paths: Vec<String> },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
