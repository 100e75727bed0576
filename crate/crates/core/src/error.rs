use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (zero signed area)")]
    DegenerateTriangle,

    #[error("point at the projection pole has no finite preimage")]
    PoleSingularity,

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("too few items: need at least {need}, got {got}")]
    TooFewItems { need: usize, got: usize },

    #[error("no acceptable separator after {0} attempts")]
    RetriesExhausted(usize),

    #[error("pop on empty priority queue")]
    PopEmpty,

    #[error("stream too short: requested {requested} items, stream holds {available}")]
    StreamTooShort { requested: usize, available: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("separator tree fan-out exceeds memory: {0}")]
    FanoutExceeded(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("vertex {0} appears with different heights")]
    InconsistentHeights(u64),

    #[error("too many points for in-memory triangulation: {0}")]
    TooManyPoints(usize),

    #[error("flow target {target} of vertex {source_id} is not a known vertex")]
    DanglingTarget { source_id: u64, target: i64 },

    #[error("region {region} holds {items} items, memory holds {mem}")]
    RegionTooLarge { region: usize, items: usize, mem: usize },

    #[error("cycle detected in flow graph at vertex {0}")]
    CycleDetected(u64),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("input mismatch: {0}")]
    Mismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}
