use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the engine.
///
/// Variants are grouped by the subsystem that raises them; everything funnels
/// into this one enum so training and CLI code can bubble errors without
/// conversion boilerplate.
#[derive(Debug, Error)]
pub enum Error {
    // tensor / autograd
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward root must be a scalar, got {0} elements")]
    NotScalar(usize),
    #[error("max-pool requires even spatial dims, got {h}x{w}")]
    OddSpatialDim { h: usize, w: usize },

    // encoders / unet
    #[error("unknown encoder preset '{0}'")]
    UnknownPreset(String),
    #[error("input spatial dims {h}x{w} not usable: {reason}")]
    BadSpatialDims { h: usize, w: usize, reason: String },
    #[error("input size {got_h}x{got_w} does not match configured {want_h}x{want_w}")]
    BadInputSize {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    // data
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("failed to decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("image/mask size mismatch for '{stem}': image {img_h}x{img_w}, mask {mask_h}x{mask_w}")]
    SizeMismatch {
        stem: String,
        img_h: usize,
        img_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("split '{0}' is empty")]
    EmptySplit(String),
    #[error("splits are not disjoint: '{stem}' appears in both {a} and {b}")]
    SplitOverlap { stem: String, a: String, b: String },

    // metrics
    #[error("metric input list is empty")]
    EmptyList,

    // training
    #[error("schedule step {step} out of range 0..={total}")]
    OutOfRange { step: usize, total: usize },
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    // checkpoints
    #[error("bad checkpoint magic (expected \"UNSG\")")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint preset '{found}' does not match model preset '{expected}'")]
    PresetMismatch { found: String, expected: String },
    #[error("checkpoint file truncated or corrupt")]
    TruncatedFile,
    #[error("checkpoint tensor table mismatch: {0}")]
    TensorTableMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by ops that compare two shapes.
    pub(crate) fn shapes(what: &str, a: &[usize], b: &[usize]) -> Self {
        Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
    }
}
