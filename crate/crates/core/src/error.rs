use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("insufficient time steps: {found} found, {required} required")]
    InsufficientSteps { found: usize, required: usize },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("incomplete coverage: {0}")]
    IncompleteCoverage(String),

    #[error("duplicate tile at ({x0}, {y0})")]
    DuplicateTile { x0: usize, y0: usize },

    #[error("empty mask")]
    EmptyMask,

    #[error("empty history")]
    EmptyHistory,

    #[error("pixel ({x}, {y}) out of bounds for {width}x{height}")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("bad magic in embedding cache")]
    BadMagic,

    #[error("unsupported embedding cache version {0}")]
    BadVersion(u16),

    #[error("unsupported embedding cache dtype {0}")]
    BadDtype(u8),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("truncated embedding cache: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("missing embedding for step `{timestamp}` tile ({x0}, {y0}): {path}")]
    MissingEmbedding {
        timestamp: String,
        x0: usize,
        y0: usize,
        path: PathBuf,
    },

    #[error("object placement failed: {0}")]
    Placement(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("png encoding error: {0}")]
    Png(#[from] png::EncodingError),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
