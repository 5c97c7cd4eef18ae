//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {detail}")]
    Json { path: PathBuf, detail: String },

    #[error("http fetch of {url} failed: {detail}")]
    Http { url: String, detail: String },

    #[error("csv error at {path}: {detail}")]
    Csv { path: PathBuf, detail: String },

    #[error("unknown band {band:?} referenced by item {tile}/{datetime}")]
    UnknownBand {
        band: String,
        tile: String,
        datetime: String,
    },

    #[error("duplicate (tile, datetime, band) entry: {tile}/{datetime}/{band}")]
    DuplicateItem {
        tile: String,
        datetime: String,
        band: String,
    },

    #[error("filter produced an empty result set")]
    EmptyResult,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("window ({row0},{col0})+{nrows}x{ncols} out of bounds for grid {grid_rows}x{grid_cols}")]
    WindowOutOfBounds {
        row0: usize,
        col0: usize,
        nrows: usize,
        ncols: usize,
        grid_rows: usize,
        grid_cols: usize,
    },

    #[error("location ({lon}, {lat}) outside every tile footprint")]
    OutsideExtent { lon: f64, lat: f64 },

    #[error("integrity error in {file}: {detail}")]
    Integrity { file: PathBuf, detail: String },

    #[error("feature layout mismatch: model expects {expected}, got {got}")]
    LayoutMismatch { expected: String, got: String },

    #[error("bad magic bytes in model file {path}")]
    BadMagic { path: PathBuf },

    #[error("model file {path} has format version {found}, this build supports <= {supported}")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("insufficient memory: one-row chunks need {required} bytes but the budget allows {allowed}")]
    InsufficientMemory { required: u64, allowed: u64 },

    #[error("non-finite training loss at epoch {epoch}; try a lower learning rate")]
    NonFiniteLoss { epoch: usize },

    #[error("time-series table is empty")]
    EmptyTable,

    #[error("unknown key {key:?} (accepted: {accepted})")]
    UnknownKey { key: String, accepted: String },

    #[error("stratified folds impossible: label {label:?} has {have} samples, k={need} required")]
    Stratification {
        label: String,
        have: usize,
        need: usize,
    },

    #[error("job does not match inputs: {0}")]
    JobMismatch(String),

    #[error("job stopped with {done} of {total} chunks done; resume to continue")]
    JobIncomplete { done: usize, total: usize },

    #[error("chunk {chunk_id} failed after {attempts} attempts: {detail}")]
    ChunkFailed {
        chunk_id: usize,
        attempts: usize,
        detail: String,
    },

    #[error("unknown reference labels not present in the map legend: {labels:?}")]
    UnknownLabels { labels: Vec<String> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
