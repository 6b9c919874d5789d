use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    #[error("corrupt pixel data: {0}")]
    CorruptPixelData(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("duplicate manifest entry: {0}")]
    DuplicateEntry(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("degenerate region of interest: {0}")]
    DegenerateRoi(String),

    #[error("region of interest {roi_height}x{roi_width} cannot hold a {patch_size}x{patch_size} patch")]
    RoiTooSmall {
        roi_height: usize,
        roi_width: usize,
        patch_size: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("batch of {0} patches is too small; batch statistics need at least 2")]
    BatchTooSmall(usize),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("archive schema error: {0}")]
    Schema(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("dicom error: {0}")]
    Dicom(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }
}
