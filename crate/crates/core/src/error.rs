use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tokenizer error: {0}")]
    Token(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SegError>;

impl SegError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }
}
