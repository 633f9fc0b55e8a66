//! File formats and the run-directory layout shared with the exporter and
//! with external correspondence producers.

mod attention_record;
mod csv_corrs;
pub mod format;
mod run_dir;

pub use attention_record::{
    read_attention, target_columns, write_attention, AttentionRecord, AttentionSpace,
    AttentionStorage, RowMaximum, SparseTopK,
};
pub use csv_corrs::{
    format_correspondences, parse_correspondences, read_correspondences, write_correspondences,
    CorrespondenceFile, RejectedRow,
};
pub use format::{
    decode, decode_all, read_tensor, read_tensors, write_tensor, write_tensors, DType, Tensor,
    TensorData,
};
pub use run_dir::{
    read_features, write_features, AttentionExport, AttentionStorageKind, CameraPairRecord,
    GroundTruth, InterventionRef, ModelId, PairRun, RunDir, RunKey, RunManifest, SceneRecord,
    TokenFeatures, TokenKind, EXPORTER_VERSION, RUN_MANIFEST_VERSION,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic {found:?}, expected \"EPGT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}")]
    VersionMismatch { found: u32 },
    #[error("unknown dtype code {0}")]
    UnknownDType(u32),
    #[error("header cut short")]
    TruncatedHeader,
    #[error("payload truncated: header promises {expected} bytes, {available} present")]
    TruncatedPayload { expected: u64, available: u64 },
    #[error("dimension product overflows")]
    DimOverflow,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{bytes} unexpected bytes after the record")]
    TrailingData { bytes: u64 },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| TensorIoError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| TensorIoError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
