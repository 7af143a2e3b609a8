//! Per-run summary files and the consolidated per-setting accuracy table.

use crate::{data_error, CliError};
use hubprobe::data::atomic_write;
use hubprobe::training::RunSetting;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// What a finished run leaves behind for the `report` command: identity,
/// scalar metrics, and every file it emitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub run_id: String,
    pub setting: Option<String>,
    pub task: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<String>,
    pub toolkit_version: String,
    pub config_hash: String,
}

impl AnalysisReport {
    pub fn new(run_id: String, setting: Option<String>, task: Option<String>, config_hash: String) -> Self {
        AnalysisReport {
            run_id,
            setting,
            task,
            metrics: BTreeMap::new(),
            files: Vec::new(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
        }
    }

    /// Writes `report.json` into `dir`, listing itself among the emitted
    /// files.
    pub fn save(&mut self, dir: &Path) -> Result<PathBuf, CliError> {
        if !self.files.iter().any(|f| f == "report.json") {
            self.files.push("report.json".into());
        }
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        atomic_write(&path, text.as_bytes()).map_err(data_error)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<AnalysisReport, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::io_error(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Directory holding completed runs (searched one level deep).
    #[arg(long, default_value = ".")]
    pub dir: PathBuf,
    /// Where report.csv and report.txt go; defaults to --dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Row {
    setting: String,
    run_id: String,
    overall: f64,
    original: f64,
    foiled: f64,
}

fn collect_reports(dir: &Path) -> Result<Vec<AnalysisReport>, CliError> {
    let mut paths = Vec::new();
    let own = dir.join("report.json");
    if own.is_file() {
        paths.push(own);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| crate::io_error(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let candidate = sub.join("report.json");
        if candidate.is_file() {
            paths.push(candidate);
        }
    }
    paths.iter().map(|p| AnalysisReport::load(p)).collect()
}

fn setting_order(name: &str) -> usize {
    RunSetting::ALL
        .iter()
        .position(|s| s.name() == name)
        .unwrap_or(RunSetting::ALL.len())
}

/// One row per setting with overall/original/foiled accuracy, choosing the
/// highest-overall run when a setting was run several times.
pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let reports = collect_reports(&args.dir)?;
    let mut best: BTreeMap<String, Row> = BTreeMap::new();
    for report in reports {
        let Some(setting) = report.setting.clone() else { continue };
        let Some(&overall) = report.metrics.get("accuracy_overall") else { continue };
        let row = Row {
            setting: setting.clone(),
            run_id: report.run_id.clone(),
            overall,
            original: report.metrics.get("accuracy_original").copied().unwrap_or(f64::NAN),
            foiled: report.metrics.get("accuracy_foiled").copied().unwrap_or(f64::NAN),
        };
        let replace = match best.get(&setting) {
            None => true,
            Some(current) => {
                row.overall > current.overall
                    || (row.overall == current.overall && row.run_id < current.run_id)
            }
        };
        if replace {
            best.insert(setting, row);
        }
    }
    if best.is_empty() {
        return Err(CliError::Data(format!(
            "no completed runs with accuracy metrics under {}",
            args.dir.display()
        )));
    }
    let mut rows: Vec<Row> = best.into_values().collect();
    rows.sort_by(|a, b| {
        setting_order(&a.setting).cmp(&setting_order(&b.setting)).then(a.setting.cmp(&b.setting))
    });

    let mut csv = String::from("setting,overall,original,foiled\n");
    let mut text = format!("{:<22} {:>8} {:>9} {:>8}\n", "setting", "overall", "original", "foiled");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.setting, row.overall, row.original, row.foiled
        ));
        text.push_str(&format!(
            "{:<22} {:>8.4} {:>9.4} {:>8.4}\n",
            row.setting, row.overall, row.original, row.foiled
        ));
    }

    let out = args.out.clone().unwrap_or_else(|| args.dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| crate::io_error(&out, e))?;
    atomic_write(&out.join("report.csv"), csv.as_bytes()).map_err(data_error)?;
    atomic_write(&out.join("report.txt"), text.as_bytes()).map_err(data_error)?;
    print!("{text}");
    Ok(())
}
