use std::io;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step {t} out of range 1..={max}")]
    Step { t: usize, max: usize },
    #[error("shape error{}: {msg}", layer.as_ref().map(|l| format!(" in layer `{l}`")).unwrap_or_default())]
    Shape { layer: Option<String>, msg: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape { layer: None, msg: msg.into() }
    }

    pub(crate) fn in_layer(self, id: &str) -> Self {
        match self {
            Error::Shape { layer: None, msg } => Error::Shape { layer: Some(id.to_string()), msg },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
