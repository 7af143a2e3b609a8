//! Representation-space commands: similarity-structure matrices over
//! checkpoints and perturbed inputs, the category nearest-neighbour
//! protocol, and bank density.

use crate::config::{stem, ConfigArgs, LoadedBanks, RunConfig};
use crate::{analysis_error, data_error, CliError};
use hubprobe::analysis::{
    density, encode_dataset, mean_paired_cosine, nn_category_protocol, nn_overlap, perturb_inputs,
    rsa_matrix, write_density_csv, write_nn_overlap_csv, write_rsa_matrix_csv, PerturbMode,
    RepresentationSet,
};
use hubprobe::data::{DatapointRecord, EmbeddingBank};
use hubprobe::math::linalg::Vector;
use hubprobe::math::SeedStream;
use hubprobe::training::Checkpoint;
use rand::seq::SliceRandom;
use std::collections::HashSet;
use std::path::PathBuf;

#[derive(clap::Args, Debug)]
pub struct RsaArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// One hub space per checkpoint; labels come from the file stems.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub visual_bank: PathBuf,
    #[arg(long)]
    pub language_bank: PathBuf,
    /// Input perturbations applied per checkpoint: foil-pair,
    /// scrambled-language, mismatched-image, mismatched-language.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    /// Leave the raw visual/language input spaces out of the matrix.
    #[arg(long)]
    pub no_inputs: bool,
    /// Unique-image datapoints to sample.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Seeded sample of record indices with pairwise-distinct images, in
/// original dataset order.
fn unique_image_sample(
    records: &[DatapointRecord],
    sample: usize,
    seed: u64,
) -> Result<Vec<usize>, CliError> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = SeedStream::new(seed).substream("rsa-sample").rng();
    order.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut picked: Vec<usize> = order
        .into_iter()
        .filter(|&i| seen.insert(records[i].image_id.clone()))
        .take(sample)
        .collect();
    picked.sort_unstable();
    if picked.len() < 2 {
        return Err(CliError::Data(format!(
            "need at least 2 unique-image datapoints, found {}",
            picked.len()
        )));
    }
    Ok(picked)
}

fn select(records: &[DatapointRecord], indices: &[usize]) -> Vec<DatapointRecord> {
    indices.iter().map(|&i| records[i].clone()).collect()
}

/// Raw input-bank rows for the sampled records, as their own space.
fn input_space(
    bank: &EmbeddingBank,
    records: &[DatapointRecord],
    id_of: impl Fn(&DatapointRecord) -> &str,
    label: &str,
) -> Result<RepresentationSet, CliError> {
    let rows: Vec<Vector> = records
        .iter()
        .map(|r| bank.vector(id_of(r)))
        .collect::<Result<_, _>>()
        .map_err(data_error)?;
    RepresentationSet::new(label, "input bank", rows).map_err(analysis_error)
}

pub fn cmd_rsa(args: &RsaArgs) -> Result<(), CliError> {
    let (config, seed) = args.common.load()?;
    let banks = LoadedBanks::load(&args.visual_bank, &args.language_bank)?;
    let records = crate::config::load_records(&args.data)?;
    let modes: Vec<PerturbMode> = args
        .modes
        .iter()
        .map(|name| {
            PerturbMode::parse(name)
                .ok_or_else(|| CliError::Config(format!("unknown perturbation mode {name:?}")))
        })
        .collect::<Result<_, _>>()?;

    // perturb first so twins stay pairable, then sample the same indices
    // from base and variants
    let variants: Vec<Vec<DatapointRecord>> = modes
        .iter()
        .map(|&mode| perturb_inputs(&records, mode, seed).map_err(analysis_error))
        .collect::<Result<_, _>>()?;
    let sample = args.sample.unwrap_or(config.sample_size);
    let indices = unique_image_sample(&records, sample, seed)?;
    let base_records = select(&records, &indices);

    let mut labels_seen: HashSet<String> = HashSet::new();
    let mut unique_label = |base: String| -> String {
        let mut label = base.clone();
        let mut suffix = 2;
        while !labels_seen.insert(label.clone()) {
            label = format!("{base}-{suffix}");
            suffix += 1;
        }
        label
    };

    let mut sets: Vec<RepresentationSet> = Vec::new();
    let mut paired: Vec<(String, String, f64)> = Vec::new();
    for path in &args.checkpoints {
        let ckpt = Checkpoint::load(path).map_err(data_error)?;
        let label = unique_label(stem(path));
        let base = encode_dataset(
            &ckpt.encoder,
            &base_records,
            &banks.visual,
            &banks.language,
            &label,
            "hub encodings",
        )
        .map_err(analysis_error)?;
        for (mode, variant) in modes.iter().zip(&variants) {
            let variant_label = unique_label(format!("{label}+{}", mode.name()));
            let set = encode_dataset(
                &ckpt.encoder,
                &select(variant, &indices),
                &banks.visual,
                &banks.language,
                &variant_label,
                "hub encodings of perturbed inputs",
            )
            .map_err(analysis_error)?;
            let cosine = mean_paired_cosine(&base, &set).map_err(analysis_error)?;
            paired.push((label.clone(), variant_label, cosine));
            sets.push(set);
        }
        sets.push(base);
    }
    if !args.no_inputs {
        sets.push(input_space(&banks.visual, &base_records, |r| &r.image_id, "visual")?);
        sets.push(input_space(&banks.language, &base_records, |r| &r.language_id, "language")?);
    }
    // keep matrix rows in a stable, readable order: bases first
    sets.sort_by_key(|s| s.label().to_string());

    let refs: Vec<&RepresentationSet> = sets.iter().collect();
    let matrix = rsa_matrix(&refs).map_err(analysis_error)?;
    let out = crate::config::output_dir(&args.out, &config)?;
    let path = out.join("rsa_matrix.csv");
    write_rsa_matrix_csv(&path, &matrix).map_err(data_error)?;
    println!("rsa: {} spaces over {} datapoints -> {}", sets.len(), indices.len(), path.display());
    for (base, variant, cosine) in paired {
        let i = matrix.labels.iter().position(|l| *l == base).unwrap();
        let j = matrix.labels.iter().position(|l| *l == variant).unwrap();
        println!(
            "rsa: {base} vs {variant}: rho = {:.4}, mean paired cosine = {:.4}",
            matrix.values[i][j], cosine,
        );
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct NnOverlapArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub category_language_bank: PathBuf,
    #[arg(long)]
    pub category_visual_bank: PathBuf,
    /// Neighbourhood sizes to report.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_nn_overlap(args: &NnOverlapArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.common.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(data_error)?;
    let language = EmbeddingBank::load(&args.category_language_bank).map_err(data_error)?;
    let visual = EmbeddingBank::load(&args.category_visual_bank).map_err(data_error)?;
    let pairing = nn_category_protocol(&ckpt.encoder, &language, &visual).map_err(analysis_error)?;
    let ks = args.k.clone().unwrap_or_else(|| config.k.clone());

    let mut rows = Vec::new();
    for &k in &ks {
        for (other, name) in [(&pairing.visual, "visual"), (&pairing.language, "language")] {
            let overlap = nn_overlap(&pairing.hub, other, k).map_err(analysis_error)?;
            rows.push(("hub".to_string(), name.to_string(), k, overlap));
        }
    }
    let out = crate::config::output_dir(&args.out, &config)?;
    let path = out.join("nn_overlap.csv");
    write_nn_overlap_csv(&path, &rows).map_err(data_error)?;
    println!("nn-overlap: {} categories -> {}", pairing.categories.len(), path.display());
    for (a, b, k, overlap) in &rows {
        println!("nn-overlap: {a} vs {b} at k={k}: {overlap:.4}");
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct DensityArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Banks to measure; one output row per bank, labelled by file stem.
    #[arg(long = "bank", required = true)]
    pub banks: Vec<PathBuf>,
    /// Rows to sample from each bank.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_density(args: &DensityArgs) -> Result<(), CliError> {
    let (config, seed) = args.common.load()?;
    let sample = args.sample.unwrap_or(config.sample_size);
    let mut rows = Vec::new();
    for path in &args.banks {
        let bank = EmbeddingBank::load(path).map_err(data_error)?;
        let value = density(&bank, sample, seed).map_err(analysis_error)?;
        rows.push((stem(path), value));
    }
    let out = crate::config::output_dir(&args.out, &config)?;
    let path = out.join("density.csv");
    write_density_csv(&path, &rows).map_err(data_error)?;
    for (label, value) in &rows {
        println!("density: {label} = {value:.4}");
    }
    println!("density: wrote {}", path.display());
    Ok(())
}
