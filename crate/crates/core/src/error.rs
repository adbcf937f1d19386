use std::io;

use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular after {attempts} ridge attempts (last jitter {jitter:e})")]
    Singular { attempts: usize, jitter: f64 },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("architecture mismatch: expected fingerprint {expected:016x}, found {found:016x}")]
    ArchitectureMismatch { expected: u64, found: u64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sinkhorn: {0}")]
    Sinkhorn(String),

    #[error("round {round} aborted: station {station} has no successful client")]
    RoundAborted { round: usize, station: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
