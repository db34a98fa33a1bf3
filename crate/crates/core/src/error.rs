use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("ensemble covariance needs at least 2 members, got {0}")]
    InsufficientMembers(usize),
    #[error("operation not supported for {0} covariance")]
    UnsupportedKind(&'static str),
    #[error("blend weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("matrix is not positive definite after jitter escalation")]
    NotPositiveDefinite,
    #[error("model integration diverged (non-finite state)")]
    Diverged,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("time {time} is not aligned with the integrator step {step}")]
    MisalignedTime { time: f64, step: f64 },
    #[error("invalid time interval [{t0}, {t1}]")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("windows {index} and {next} are not contiguous")]
    NonContiguousWindows { index: usize, next: usize },
    #[error("more than half of the forecast ensemble diverged ({lost} of {total})")]
    EnsembleCollapse { lost: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
