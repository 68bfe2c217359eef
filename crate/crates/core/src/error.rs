use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum MctError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("operation not supported for variant {variant}: {what}")]
    UnsupportedVariant { variant: String, what: &'static str },
    #[error("invalid forward record: {0}")]
    InvalidRecord(String),
    #[error("gradient check failed for parameter `{param}`: relative error {rel_error:.3e} > {tol:.1e}")]
    GradientMismatch { param: String, rel_error: f64, tol: f64 },
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed archive {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MctError> = std::result::Result<T, E>;

impl MctError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MctError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MctError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
