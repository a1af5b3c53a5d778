use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    Convergence { sweeps: usize, off_norm: f64 },
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("need at least {needed} samples, got {got}")]
    SampleSize { needed: usize, got: usize },
    #[error("{name} = {value} is outside {range}")]
    Domain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("step size {eta} is outside the stable range (0, {limit})")]
    Stability { eta: f64, limit: f64 },
    #[error("index {index} out of range for {len} items")]
    Index { index: usize, len: usize },
    #[error("non-finite value in {context} at step {step}")]
    Numeric { context: String, step: usize },
    #[error("non-finite values in {model} layer {layer}")]
    NonFiniteLayer { model: &'static str, layer: usize },
    #[error("non-finite results for points {indices:?}")]
    NonFinitePoints { indices: Vec<usize> },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit_interval(name: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            name,
            value: t,
            range: "[0, 1]",
        })
    }
}
