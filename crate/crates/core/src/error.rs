use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum ShadesError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("insufficient frames: got {got}, need at least 2")]
    InsufficientFrames { got: usize },

    #[error("degenerate mask: mask covers the entire frame, no boundary to fill from")]
    DegenerateMask,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("prior cache miss: no cached I_rem/mask for frame {seq_id}/{index}")]
    PriorCacheMiss { seq_id: String, index: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    CheckpointError(String),

    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),

    #[error("no qualifying specular regions; SSM is not applicable")]
    NoRegions,

    #[error("degenerate prediction: median of predicted depth is zero")]
    DegeneratePrediction,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, ShadesError>;
