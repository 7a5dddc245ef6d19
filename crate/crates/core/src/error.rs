use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image dimensions {height}x{width}: both sides must be at least {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("image dimensions {got_h}x{got_w} do not match expected {want_h}x{want_w}")]
    DimensionMismatch {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("image of {height}x{width} is too small for layer {layer}: each side must be at least {min}")]
    InputTooSmallForLayer {
        layer: String,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("unknown backbone layer {0:?}")]
    UnknownLayer(String),

    #[error("weights manifest mismatch: missing tensor for layer {layer:?}")]
    MissingWeight { layer: String },

    #[error("weights manifest mismatch for layer {layer:?}: expected shape {expected:?}, got {got:?}")]
    WeightShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("malformed weights container: {0}")]
    WeightsFormat(String),

    #[error("feature stacks do not match: {0}")]
    StackMismatch(String),

    #[error("non-finite loss at step {step}: {context}")]
    NonFiniteLoss { step: usize, context: String },

    #[error("all {count} candidates at outer iteration {iteration} produced non-finite losses")]
    AllCandidatesNonFinite { iteration: usize, count: usize },

    #[error("reference image is identically zero; PSNR dynamic range is undefined")]
    ZeroReference,

    #[error("external denoiser failed: {command}: {detail}")]
    ExternalDenoiser { command: String, detail: String },

    #[error("unsupported image format for {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("slice index sets do not match: content index {0} has no guidance counterpart")]
    IndexMismatch(usize),

    #[error("frozen guidance index {0} is not present in the guidance slice set")]
    MissingFrozenIndex(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
