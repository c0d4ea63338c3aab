use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("vocab error: unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss not finite); last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Error {
        Error::Input(msg.into())
    }
}
