//! Error taxonomy shared by the whole crate.
//!
//! The variants are coarse on purpose: callers (notably the CLI) map each
//! class to a distinct exit code, so the split follows failure *kind*, not
//! failure site.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Prompt geometry that cannot exist (k > K, nonpositive sizes, bad pad).
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// Tensor shapes that do not line up (patch grid, mask vs. gradient, ...).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed or inconsistent run configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Bad or empty input data outside the dataset layer (images, lambdas).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Dataset loading / layout problems (missing path, empty class, bad record).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Non-finite values where finite ones are required; aborts the run.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Container / checkpoint / mapping-file parse failures.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
