//! On-disk embedding store.
//!
//! Binary layout (little-endian): magic `HUBE`, u32 version, u32 dim,
//! u64 row count, then `rows * dim` f32 values. String ids live in a sibling
//! manifest `<path>.ids` with one `row<TAB>id` line per row; load verifies
//! that the manifest is a bijection onto the payload rows.
//!
//! Values are stored as f32; all arithmetic downstream runs in f64.

use super::DataError;
use crate::math::Vector;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: [u8; 4] = *b"HUBE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

impl EmbeddingBank {
    pub fn new(dim: usize) -> Self {
        EmbeddingBank { dim, ids: Vec::new(), index: HashMap::new(), values: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends a row; ids must be unique and values finite.
    pub fn push(&mut self, id: &str, row: &[f64]) -> Result<usize, DataError> {
        if row.len() != self.dim {
            return Err(DataError::BadRecord {
                detail: format!("embedding {id:?} has dim {}, bank has {}", row.len(), self.dim),
            });
        }
        if self.index.contains_key(id) {
            return Err(DataError::DuplicateId { id: id.to_string() });
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(DataError::NotFinite { id: id.to_string() });
        }
        let at = self.ids.len();
        self.index.insert(id.to_string(), at);
        self.ids.push(id.to_string());
        self.values.extend(row.iter().map(|&v| v as f32));
        Ok(at)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_at(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    /// Row by id, widened to f64 for arithmetic.
    pub fn vector(&self, id: &str) -> Result<Vector, DataError> {
        let row = self.row_of(id).ok_or_else(|| DataError::MissingId { id: id.to_string() })?;
        Ok(Vector::from_vec(self.row(row).iter().map(|&v| v as f64).collect()))
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".ids");
        path.with_file_name(name)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut bytes = Vec::with_capacity(20 + self.values.len() * 4);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        super::atomic_write(path, &bytes)?;

        let mut manifest = String::new();
        for (row, id) in self.ids.iter().enumerate() {
            manifest.push_str(&format!("{row}\t{id}\n"));
        }
        super::atomic_write(&Self::manifest_path(path), manifest.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        if bytes.len() < 20 {
            return Err(DataError::CorruptIndex {
                path: path.to_path_buf(),
                detail: "file shorter than header".into(),
            });
        }
        if bytes[0..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[0..4]);
            return Err(DataError::BadMagic { path: path.to_path_buf(), found });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(DataError::UnsupportedVersion { path: path.to_path_buf(), found: version });
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let expect = 20 + rows * dim * 4;
        if bytes.len() != expect {
            return Err(DataError::CorruptIndex {
                path: path.to_path_buf(),
                detail: format!("payload is {} bytes, header implies {expect}", bytes.len()),
            });
        }
        let mut values = Vec::with_capacity(rows * dim);
        for chunk in bytes[20..].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }

        let manifest_path = Self::manifest_path(path);
        let manifest =
            fs::read_to_string(&manifest_path).map_err(|e| DataError::io(&manifest_path, e))?;
        let mut ids = vec![None::<String>; rows];
        let mut index = HashMap::with_capacity(rows);
        for (lineno, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let corrupt = |detail: String| DataError::CorruptIndex {
                path: manifest_path.clone(),
                detail: format!("line {}: {detail}", lineno + 1),
            };
            let (row_str, id) = line
                .split_once('\t')
                .ok_or_else(|| corrupt("expected <row>\\t<id>".into()))?;
            let row: usize =
                row_str.parse().map_err(|_| corrupt(format!("bad row index {row_str:?}")))?;
            if row >= rows {
                return Err(corrupt(format!("row {row} out of range for {rows} rows")));
            }
            if ids[row].is_some() {
                return Err(corrupt(format!("row {row} listed twice")));
            }
            if index.insert(id.to_string(), row).is_some() {
                return Err(corrupt(format!("id {id:?} listed twice")));
            }
            ids[row] = Some(id.to_string());
        }
        let ids: Vec<String> = ids
            .into_iter()
            .enumerate()
            .map(|(row, id)| {
                id.ok_or_else(|| DataError::CorruptIndex {
                    path: manifest_path.clone(),
                    detail: format!("row {row} has no id"),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(EmbeddingBank { dim, ids, index, values })
    }
}
