//! Shared error type for the pipeline crates.

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad wav file: {0}")]
    BadWav(String),
    #[error("bad mel container: {0}")]
    BadMel(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Ckpt(#[from] t2a_nn::NnError),
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numeric(String),
    #[error("training: {0}")]
    Train(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
