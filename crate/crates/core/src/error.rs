use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("tokenization error: unknown word {0:?}")]
    UnknownWord(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("batch composition error: {0}")]
    BatchComposition(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
