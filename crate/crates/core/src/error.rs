use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Precondition,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point (lat {lat}, lon {lon})")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("footprint crosses the antimeridian")]
    AntimeridianCrossing,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector for record {0:?}")]
    ZeroVector(String),
    #[error("non-finite vector entry in record {0:?}")]
    NonFinite(String),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("cluster {cluster} has {available} usable locations, need {needed}")]
    InsufficientCluster {
        cluster: usize,
        available: usize,
        needed: usize,
    },
    #[error("could not fill a batch of {wanted} pairs (got {got} after {attempts} attempts)")]
    CannotFillBatch {
        wanted: usize,
        got: usize,
        attempts: usize,
    },
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("record {0:?} has no footprint")]
    MissingFootprint(String),
    #[error("base image {0:?} lacks the four rotation variants")]
    MissingRotations(String),
    #[error("index is empty after filtering")]
    EmptyIndex,
    #[error("synthetic grid holds at most {capacity} locations, asked for {requested}")]
    GridCapacity { capacity: usize, requested: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io(_) => ErrorClass::Io,
            InvalidPoint { .. }
            | InvalidTile(_)
            | DegenerateGeometry(_)
            | AntimeridianCrossing
            | DimensionMismatch { .. }
            | ZeroVector(_)
            | NonFinite(_)
            | DuplicateId(_)
            | InvalidRecord { .. }
            | BadMagic
            | VersionMismatch(_)
            | Truncated(_)
            | Format { .. }
            | Json(_) => ErrorClass::Format,
            InvalidBatch(_)
            | InsufficientCluster { .. }
            | CannotFillBatch { .. }
            | TooFewVectors { .. }
            | MissingFootprint(_)
            | MissingRotations(_)
            | EmptyIndex
            | GridCapacity { .. }
            | InvalidArgument(_) => ErrorClass::Precondition,
            Numeric(_) => ErrorClass::Numeric,
        }
    }
}
