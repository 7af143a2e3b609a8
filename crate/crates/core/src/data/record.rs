//! Datapoint schema shared by every task, stored as JSON lines.

use super::DataError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Referit,
    Guesswhat,
    Foil,
}

impl Task {
    pub const RETRIEVAL: [Task; 3] = [Task::Vqa, Task::Referit, Task::Guesswhat];

    pub fn is_retrieval(&self) -> bool {
        !matches!(self, Task::Foil)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Referit => "referit",
            Task::Guesswhat => "guesswhat",
            Task::Foil => "foil",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "vqa" => Some(Task::Vqa),
            "referit" => Some(Task::Referit),
            "guesswhat" => Some(Task::Guesswhat),
            "foil" => Some(Task::Foil),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Caption class for the binary classification task; retrieval records
/// carry `n/a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoilLabel {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "foiled")]
    Foiled,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl FoilLabel {
    /// Class index used by the classifier head: original 0, foiled 1.
    pub fn class_index(&self) -> Option<usize> {
        match self {
            FoilLabel::Original => Some(0),
            FoilLabel::Foiled => Some(1),
            FoilLabel::NotApplicable => None,
        }
    }
}

/// One datapoint of any task.
///
/// Retrieval records rank `candidate_ids` (answer ids for VQA, image ids
/// otherwise) with the ground truth at `gt_index`. Classification records
/// have no candidates; `label` carries the class. `meta` holds numeric
/// covariates (caption_length, num_objects, target_area, foil_position,
/// pair_id, has_scrambled, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatapointRecord {
    pub task: Task,
    pub image_id: String,
    pub language_id: String,
    #[serde(default)]
    pub candidate_ids: Vec<String>,
    #[serde(default)]
    pub gt_index: usize,
    pub label: FoilLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_object: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, f64>,
}

impl DatapointRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |detail: String| Err(DataError::BadRecord { detail });
        if self.image_id.is_empty() {
            return fail("empty image_id".into());
        }
        if self.language_id.is_empty() {
            return fail("empty language_id".into());
        }
        if self.task.is_retrieval() {
            if self.label != FoilLabel::NotApplicable {
                return fail(format!("{} record must carry label n/a", self.task));
            }
            if self.candidate_ids.is_empty() {
                return fail(format!("{} record needs candidates", self.task));
            }
            if self.gt_index >= self.candidate_ids.len() {
                return fail(format!(
                    "gt_index {} out of range for {} candidates",
                    self.gt_index,
                    self.candidate_ids.len()
                ));
            }
            let mut seen = HashSet::with_capacity(self.candidate_ids.len());
            for id in &self.candidate_ids {
                if !seen.insert(id) {
                    return fail(format!("duplicate candidate {id:?}"));
                }
            }
        } else {
            if self.label == FoilLabel::NotApplicable {
                return fail("classification record needs a class label".into());
            }
            if !self.candidate_ids.is_empty() {
                return fail("classification record must not list candidates".into());
            }
        }
        Ok(())
    }

    pub fn gt_id(&self) -> &str {
        &self.candidate_ids[self.gt_index]
    }

    pub fn meta_value(&self, key: &str) -> Option<f64> {
        self.meta.get(key).copied()
    }
}

/// Writes records as one JSON object per line (atomic rename).
pub fn save_dataset(records: &[DatapointRecord], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serialization is infallible"));
        out.push('\n');
    }
    super::atomic_write(path, out.as_bytes())
}

/// Reads and validates a JSON-lines dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<DatapointRecord>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatapointRecord = serde_json::from_str(&line).map_err(|e| {
            DataError::Parse { path: path.to_path_buf(), line: lineno + 1, detail: e.to_string() }
        })?;
        record.validate().map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
