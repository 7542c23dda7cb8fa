use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("block is not in {0} form")]
    MissingForm(&'static str),

    #[error("model is already deployed")]
    AlreadyDeployed,

    #[error("gradient tape: {0}")]
    Tape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("benchmark: {0}")]
    Bench(String),

    #[error("bad magic bytes {0:?}, expected \"MVT2\"")]
    BadMagic([u8; 4]),

    #[error("unsupported weight file version {0}")]
    Version(u32),

    #[error("truncated weight file: {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("weight file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
