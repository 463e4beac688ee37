use thiserror::Error;

/// Errors raised across the lab. Configuration problems are kept apart from
/// runtime faults so the CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in `{field}`")]
    NonFinite { field: &'static str },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("euler singularity: pitch {pitch} rad is outside (-pi/2, pi/2)")]
    EulerSingularity { pitch: f64 },

    #[error("gradient check failed on instance {instance}: relative error {error:e}")]
    GradientCheck { instance: usize, error: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], field: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { field })
    }
}
