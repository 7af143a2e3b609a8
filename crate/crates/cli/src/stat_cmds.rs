//! Per-datapoint statistics commands: correlating probe success with
//! record covariates and fitting a logistic regression over them.

use crate::config::{load_records, output_dir, ConfigArgs, LoadedBanks};
use crate::{data_error, probe_error, CliError};
use hubprobe::data::{atomic_write, DatapointRecord};
use hubprobe::math::linalg::Matrix;
use hubprobe::probing::{correlate_success, logistic_success_regression, probe_success_bits};
use hubprobe::training::Checkpoint;
use std::collections::BTreeSet;
use std::path::PathBuf;

#[derive(clap::Args, Debug)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub visual_bank: PathBuf,
    #[arg(long)]
    pub language_bank: PathBuf,
    /// Covariates to test; defaults to every non-constant metadata key.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// All metadata keys present on any record, sorted.
fn discovered_covariates(records: &[DatapointRecord]) -> Vec<String> {
    let mut keys = BTreeSet::new();
    for record in records {
        for key in record.meta.keys() {
            keys.insert(key.clone());
        }
    }
    keys.into_iter().collect()
}

fn is_constant(records: &[DatapointRecord], covariate: &str) -> bool {
    let mut first = None;
    for record in records {
        if let Some(v) = record.meta_value(covariate) {
            match first {
                None => first = Some(v),
                Some(f) if f != v => return false,
                Some(_) => {}
            }
        }
    }
    true
}

pub fn cmd_correlate(args: &CorrelateArgs) -> Result<(), CliError> {
    let config = crate::config::RunConfig::load(args.common.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(data_error)?;
    let banks = LoadedBanks::load(&args.visual_bank, &args.language_bank)?;
    let records = load_records(&args.data)?;
    let success = probe_success_bits(&ckpt, &records, &banks.banks()).map_err(probe_error)?;

    let discovering = args.covariates.is_empty();
    let covariates = if discovering {
        discovered_covariates(&records)
    } else {
        args.covariates.clone()
    };
    if covariates.is_empty() {
        return Err(CliError::Data("no metadata covariates found in the dataset".into()));
    }

    let mut rows = Vec::new();
    for name in &covariates {
        if discovering && is_constant(&records, name) {
            eprintln!("correlate: skipping constant covariate {name:?}");
            continue;
        }
        let corr = correlate_success(&success, name, &records).map_err(probe_error)?;
        rows.push((name.clone(), corr));
    }
    if rows.is_empty() {
        return Err(CliError::Data("every discovered covariate was constant".into()));
    }

    let mut csv = String::from("covariate,pearson,spearman,n\n");
    for (name, corr) in &rows {
        csv.push_str(&format!("{name},{},{},{}\n", corr.pearson, corr.spearman, corr.n));
    }
    let out = output_dir(&args.out, &config)?;
    let path = out.join("correlations.csv");
    atomic_write(&path, csv.as_bytes()).map_err(data_error)?;
    println!("correlate: {} datapoints -> {}", records.len(), path.display());
    for (name, corr) in &rows {
        println!(
            "correlate: {name}: pearson = {:.4}, spearman = {:.4}, n = {}",
            corr.pearson, corr.spearman, corr.n,
        );
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct RegressArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub visual_bank: PathBuf,
    #[arg(long)]
    pub language_bank: PathBuf,
    /// Feature covariates; defaults to every non-constant metadata key.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_regress(args: &RegressArgs) -> Result<(), CliError> {
    let config = crate::config::RunConfig::load(args.common.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(data_error)?;
    let banks = LoadedBanks::load(&args.visual_bank, &args.language_bank)?;
    let records = load_records(&args.data)?;
    let success = probe_success_bits(&ckpt, &records, &banks.banks()).map_err(probe_error)?;

    let covariates = if args.covariates.is_empty() {
        discovered_covariates(&records)
            .into_iter()
            .filter(|name| !is_constant(&records, name))
            .collect()
    } else {
        args.covariates.clone()
    };
    if covariates.is_empty() {
        return Err(CliError::Data("no usable covariates for the regression".into()));
    }

    // keep only rows where every covariate is present
    let mut kept = Vec::new();
    let mut features = Vec::new();
    for (record, &hit) in records.iter().zip(&success) {
        let row: Option<Vec<f64>> =
            covariates.iter().map(|name| record.meta_value(name)).collect();
        if let Some(row) = row {
            features.extend_from_slice(&row);
            kept.push(hit);
        }
    }
    if kept.is_empty() {
        return Err(CliError::Data(format!(
            "no datapoint carries all covariates {covariates:?}"
        )));
    }
    let matrix = Matrix::from_vec(kept.len(), covariates.len(), features)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let fit = logistic_success_regression(&kept, &matrix).map_err(probe_error)?;

    let mut csv = String::from("term,coefficient\n");
    csv.push_str(&format!("intercept,{}\n", fit.intercept));
    for (name, coef) in covariates.iter().zip(&fit.coefficients) {
        csv.push_str(&format!("{name},{coef}\n"));
    }
    let out = output_dir(&args.out, &config)?;
    let path = out.join("regression.csv");
    atomic_write(&path, csv.as_bytes()).map_err(data_error)?;
    println!(
        "regress: {} of {} datapoints, {} steps, gradient norm {:.2e} -> {}",
        kept.len(),
        records.len(),
        fit.steps,
        fit.gradient_norm,
        path.display(),
    );
    println!("regress: intercept = {:.4}", fit.intercept);
    for (name, coef) in covariates.iter().zip(&fit.coefficients) {
        println!("regress: {name} = {coef:.4}");
    }
    if fit.separation {
        eprintln!("regress: warning: a coefficient is large; the classes may be separable");
    }
    Ok(())
}
