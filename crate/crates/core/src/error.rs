use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("self-loop on node {0} is not allowed")]
    SelfLoop(usize),

    #[error("node {0} is isolated (degree 0); normalized Laplacian undefined")]
    IsolatedNode(usize),

    #[error("hop order {order} exceeds precomputed maximum {max}")]
    OrderTooLarge { order: usize, max: usize },

    #[error("filter bank in chebyshev mode has no trainable parameters")]
    NotTrainable,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("history is not sorted by time at index {0}")]
    UnorderedHistory(usize),

    #[error("non-positive intensity {value} at event {index} of sequence {sequence}")]
    InfeasibleLoss {
        sequence: usize,
        index: usize,
        value: f64,
    },

    #[error("intensity {value} <= bound {bound} at t={t}, node {node}, sequence {sequence}")]
    InfeasibleBarrier {
        sequence: usize,
        t: f64,
        node: usize,
        value: f64,
        bound: f64,
    },

    #[error("negative intensity {value} at t={t}, node {node} while clamping is disabled")]
    NegativeIntensity { t: f64, node: usize, value: f64 },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by the numerics (intensity positivity) rather
    /// than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::InfeasibleLoss { .. }
                | Error::InfeasibleBarrier { .. }
                | Error::NegativeIntensity { .. }
                | Error::TrainingAborted(_)
        )
    }
}
