use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or batch shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid skeleton topology or keypoint data.
    #[error("topology error: {0}")]
    Topology(String),

    /// A loss component became non-finite during training.
    #[error("non-finite value in `{component}` at iteration {iteration}")]
    NonFinite { component: String, iteration: u64 },

    /// Pre-training failed to reach the required accuracy by the iteration cap.
    #[error(
        "eta pre-training did not converge: RMS coordinate error {achieved:.4} \
         after {iterations} iterations (required < {required})"
    )]
    PretrainDiverged {
        achieved: f64,
        required: f64,
        iterations: u64,
    },

    /// Malformed data file (topology, keypoint samples, config, checkpoint).
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// Checkpoint archive is corrupt or from an incompatible layout.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
