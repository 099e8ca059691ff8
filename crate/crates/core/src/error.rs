use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("voxel index ({i}, {j}, {k}) out of range for dims {dims:?}")]
    IndexOutOfRange { i: usize, j: usize, k: usize, dims: [usize; 3] },

    #[error("grid geometry mismatch: expected {expected:?}, got {actual:?}")]
    GridMismatch { expected: String, actual: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("image has zero intensity range; histogram binning is degenerate")]
    DegenerateIntensityRange,

    #[error("dependency matrix not positive definite after conditioning")]
    NotPositiveDefinite,

    #[error("empty atlas list")]
    EmptyAtlasList,

    #[error("label {0} not present in legend")]
    UnknownLabel(u32),

    #[error("empty mask where a non-empty mask is required")]
    EmptyMask,

    #[error("surface distance undefined: {0} surface is empty")]
    EmptySurface(&'static str),

    #[error("perceptron training requires examples from both classes")]
    SingleClassTraining,

    #[error("bad NIfTI magic (expected \"n+1\" or \"ni1\")")]
    BadMagic,

    #[error("big-endian NIfTI files are not supported")]
    BigEndian,

    #[error("unsupported NIfTI datatype code {0} (supported: uint8, int16, float32)")]
    UnsupportedDatatype(i16),

    #[error("NIfTI payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("NIfTI dim[0] = {0}, only 3-dimensional volumes are supported")]
    BadDimensionality(i16),

    #[error("label value {0} does not fit the widest supported integer datatype (int16)")]
    LabelOverflow(u32),

    #[error("manifest references missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("legend conflict for label {id}: \"{first}\" vs \"{second}\"")]
    LegendConflict { id: u32, first: String, second: String },

    #[error("level-set time step {dt} exceeds the explicit-scheme stability bound {bound}")]
    UnstableTimeStep { dt: f64, bound: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
