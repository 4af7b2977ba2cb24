use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {0} has a label outside [0, K)")]
    LabelOutOfRange(usize),
    #[error("image {0} has a non-finite or out-of-range pixel")]
    NonFinitePixel(usize),
    #[error("image {index} is {found:?}, expected {expected:?}")]
    InconsistentDims {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("teacher has no defined input resolution")]
    TeacherInputMismatch,
    #[error("patch {patch:?} does not fit in image {image:?}")]
    PatchLargerThanImage {
        patch: (usize, usize),
        image: (usize, usize),
    },
    #[error("output {dims:?} is not divisible by grid {grid:?}")]
    IndivisibleGrid {
        dims: (usize, usize),
        grid: (usize, usize),
    },

    #[error("timestep {t} outside [0, {steps})")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("non-finite activation during {0}")]
    NonFiniteActivation(&'static str),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergedTraining { epoch: usize, loss: f32 },

    #[error("non-finite inversion loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("no collages supplied for inversion")]
    EmptyCollageSet,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),

    #[error("teacher produced non-finite logits")]
    NonFiniteLogits,
    #[error("replayed collage hash {found} does not match recorded {expected}")]
    NonDeterministicBackend { expected: String, found: String },

    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("malformed artifact: {0}")]
    MalformedArtifact(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} failed: {cause}")]
    StageFailed { stage: String, cause: Box<Error> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
