use crate::ids::ImageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no detection runs to accumulate")]
    EmptyRuns,

    #[error("runs belong to different images ({first} and {other})")]
    MixedImages { first: ImageId, other: ImageId },

    #[error("timestep {t} outside [0, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("image {0} has no training targets")]
    NoTargets(ImageId),

    #[error("pseudo-label weights sum to zero")]
    ZeroWeightMass,

    #[error("loss became non-finite at step {step} ({value})")]
    DivergedLoss { step: usize, value: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("image ids do not align: {0}")]
    MismatchedImageIds(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unknown class '{0}'")]
    UnknownClass(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
