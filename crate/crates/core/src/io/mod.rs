//! Dataset ingestion, bit-exact serialization formats, and visualization.

mod formats;
mod manifest;
mod viz;

pub use formats::{
    load_checkpoint, load_chunk, load_correspondences, load_pairs, save_checkpoint, save_chunk,
    save_correspondences, save_pairs, PairsFile,
};
pub use manifest::{
    load_manifest, load_sequence, load_sequence_from_manifest, write_sequence, ManifestFrame,
    SequenceManifest,
};
pub use viz::{compose_pair_image, visualize_pair};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed pose in {path}: {reason}")]
    MalformedPose { path: PathBuf, reason: String },
    #[error("depth size {dw}x{dh} does not match color {cw}x{ch} and resampling is disabled")]
    DepthSizeMismatch { dw: u32, dh: u32, cw: u32, ch: u32 },
    #[error("depth image must be 16-bit grayscale: {0}")]
    DepthFormat(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("trailing bytes after the last record in {0}")]
    TrailingBytes(PathBuf),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("image decode error on {path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> IoError {
    if source.kind() == std::io::ErrorKind::NotFound {
        IoError::MissingFile(path.to_path_buf())
    } else {
        IoError::Io { path: path.to_path_buf(), source }
    }
}
