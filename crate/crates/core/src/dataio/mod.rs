//! File formats and the synthetic world.
//!
//! Datasets are JSON lines, one location per line:
//!
//! ```text
//! {"id":"p0","lon":4.7,"lat":50.9,"osm_counts":[...222 ints...],
//!  "gs_features":[...F reals...],"labels":{"region":2,"price":1.3}}
//! ```
//!
//! `osm_counts` and `gs_features` are optional; which ones must be present
//! depends on the model config (see [`check_views`]). Checkpoints are a
//! little-endian binary format with a trailing SHA-256.

mod checkpoint;
mod export;
mod records;
mod synth;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use export::{export_embeddings, write_embeddings};
pub use records::{
    check_views, dataset_to_string, load_dataset, parse_dataset, parse_dataset_bytes, write_dataset, LocationRecord,
};
pub use synth::{nearest_site, synthesize_world, LatentField, SyntheticWorld, WORLD_LAT, WORLD_LON};

use std::path::PathBuf;

use thiserror::Error;

use crate::encoders::EncoderError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {reason}")]
    Parse {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("line {line}: {view} required by the model config: {reason}")]
    ViewMismatch {
        line: usize,
        view: &'static str,
        reason: String,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint checksum mismatch (truncated or corrupted file)")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<(), DataError> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| DataError::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(DataError::io(path, e));
    }
    Ok(())
}
