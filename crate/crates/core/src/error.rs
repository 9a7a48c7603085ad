//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("shape error: {0}")]
    Dims(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("stale cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("precision error: {0}")]
    Precision(String),

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("incompatible parameters: {0}")]
    IncompatibleParams(String),

    #[error("corrupt file at byte {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("client {client_id} skipped: {reason}")]
    ClientSkipped { client_id: u32, reason: String },

    #[error("round {round}: every client was skipped")]
    AllClientsSkipped { round: u32 },

    #[error("corrupt checkpoint {path}: {source}")]
    CorruptCheckpoint {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("missing checkpoint state for client {client_id}: {path}")]
    MissingState { client_id: u32, path: PathBuf },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
