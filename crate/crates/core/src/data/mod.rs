//! Datasets and persistence: embedding banks, datapoint records, the
//! synthetic corpus generator, common-image balancing, and dataset splits.

pub mod bank;
pub mod common;
pub mod record;
pub mod split;
pub mod synthetic;

pub use bank::EmbeddingBank;
pub use common::{build_common_dataset, CommonDatasets};
pub use record::{load_dataset, save_dataset, DatapointRecord, FoilLabel, Task};
pub use split::{split_by_image, subset_fraction, DatasetSplit};
pub use synthetic::{generate_corpus, SyntheticCorpus, SyntheticSpec};

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: io::Error },
    BadMagic { path: PathBuf, found: [u8; 4] },
    UnsupportedVersion { path: PathBuf, found: u32 },
    /// A binary payload is internally inconsistent (manifest mismatch,
    /// truncation, impossible counts).
    CorruptIndex { path: PathBuf, detail: String },
    /// A line of a dataset file failed to parse or validate.
    Parse { path: PathBuf, line: usize, detail: String },
    /// A record violates the schema rules for its task.
    BadRecord { detail: String },
    /// An id was added to a bank twice.
    DuplicateId { id: String },
    /// An embedding contains NaN or infinity.
    NotFinite { id: String },
    /// Generator settings are unusable (zero dims, candidate pool too small...).
    BadSpec { detail: String },
    /// No image appears in all three retrieval datasets.
    EmptyIntersection,
    /// Split fractions must be positive and sum to one.
    BadFractions { detail: String },
    /// Subset fraction must lie in (0, 1].
    BadFraction { fraction: f64 },
    /// Lookup of an id that the bank does not hold.
    MissingId { id: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::BadMagic { path, found } => {
                write!(f, "{}: bad magic {found:?}, not an embedding bank", path.display())
            }
            DataError::UnsupportedVersion { path, found } => {
                write!(f, "{}: unsupported format version {found}", path.display())
            }
            DataError::CorruptIndex { path, detail } => {
                write!(f, "{}: corrupt id manifest: {detail}", path.display())
            }
            DataError::Parse { path, line, detail } => {
                write!(f, "{}:{line}: {detail}", path.display())
            }
            DataError::BadRecord { detail } => write!(f, "invalid record: {detail}"),
            DataError::DuplicateId { id } => write!(f, "duplicate id {id:?}"),
            DataError::NotFinite { id } => write!(f, "embedding {id:?} is not finite"),
            DataError::BadSpec { detail } => write!(f, "invalid generator spec: {detail}"),
            DataError::EmptyIntersection => {
                write!(f, "no image is present in all three datasets")
            }
            DataError::BadFractions { detail } => write!(f, "invalid fractions: {detail}"),
            DataError::BadFraction { fraction } => {
                write!(f, "fraction {fraction} outside (0, 1]")
            }
            DataError::MissingId { id } => write!(f, "id {id:?} not found in bank"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl DataError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// then rename over the destination. Concurrent writers never leave a
/// half-written file at `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = temp_sibling(path);
    let run = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(source) = run {
        let _ = fs::remove_file(&tmp);
        return Err(DataError::io(path, source));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
