use thiserror::Error;

/// Errors raised by the filter, simulator and evaluator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid time step {0} s")]
    InvalidTimeStep(f64),
    #[error("clone at t = {0} already exists")]
    DuplicateClone(f64),
    #[error("no clone at t = {0}")]
    UnknownClone(f64),
    #[error("clone window is full ({0} clones)")]
    WindowFull(usize),
    #[error("relative transform already initialized")]
    AlreadyInitialized,
    #[error("relative transform not initialized")]
    NotInitialized,
    #[error("triangulation failed: {0}")]
    Triangulation(String),
    #[error("point behind camera")]
    BehindCamera,
    #[error("pose solver failed: {0}")]
    Pnp(String),
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),
    #[error("unknown landmark {0}")]
    UnknownLandmark(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty trajectory overlap")]
    EmptyOverlap,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
