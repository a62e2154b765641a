use std::path::PathBuf;

use roadtraj_nn::NnError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure carries the module it came from so command-line callers can
/// report a categorized message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("roadnet: {0}")]
    Network(String),
    #[error("roadnet: unknown node {0}")]
    UnknownNode(u64),
    #[error("roadnet: unknown segment {0}")]
    UnknownSegment(usize),
    #[error("roadnet: segments {from} and {to} are not connected")]
    Disconnected { from: usize, to: usize },
    #[error("mapmatch: point {index} has no candidate segment within {radius_m} m")]
    NoCandidates { index: usize, radius_m: f64 },
    #[error("mapmatch: {0}")]
    Match(String),
    #[error("trajdata: {0}")]
    Data(String),
    #[error("trajdata: line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("tokenizer: {0}")]
    Token(String),
    #[error("model: {0}")]
    Model(String),
    #[error("model: {0}")]
    Nn(#[from] NnError),
    #[error("pretrain: {0}")]
    Train(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tasks: {0}")]
    Task(String),
    #[error("metrics: {0}")]
    Metric(String),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
