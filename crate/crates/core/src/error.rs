use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numkit::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("stddev {value} below floor {floor}")]
    BelowFloor { value: f64, floor: f64 },
    #[error("non-finite ELBO at epoch {epoch}, sequence {sequence}")]
    NonFiniteElbo { epoch: usize, sequence: String },
    #[error("negative KL {value} at epoch {epoch}, sequence {sequence}")]
    NegativeKl { value: f64, epoch: usize, sequence: String },
    #[error("simulator: {0}")]
    Sim(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dim { what, expected, got })
    }
}
