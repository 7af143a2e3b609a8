//! Corpus generation, dataset balancing, and image-level splitting.

use crate::config::RunConfig;
use crate::{data_error, CliError};
use hubprobe::data::{
    build_common_dataset, generate_corpus, save_dataset, split_by_image, DatapointRecord,
    SyntheticSpec,
};
use std::path::{Path, PathBuf};

#[derive(clap::Args, Debug)]
pub struct GenArgs {
    /// Corpus seed; falls back to $HUBPROBE_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub visual_dim: Option<usize>,
    #[arg(long)]
    pub language_dim: Option<usize>,
    /// Cross-modal signal strength s in [0, 1]; 0 removes all signal.
    #[arg(long)]
    pub signal: Option<f64>,
    /// Magnitude of the foiled-caption perturbation.
    #[arg(long)]
    pub foil_scale: Option<f64>,
    #[arg(long)]
    pub vqa_per_image: Option<usize>,
    #[arg(long)]
    pub referit_per_image: Option<usize>,
    #[arg(long)]
    pub guesswhat_per_image: Option<usize>,
    #[arg(long)]
    pub foil_pairs: Option<usize>,
    #[arg(long)]
    pub vqa_candidates: Option<usize>,
    #[arg(long)]
    pub visual_candidates: Option<usize>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub category_samples: Option<usize>,
    /// Skip the scrambled-caption variants.
    #[arg(long)]
    pub no_scrambled: bool,
    /// Output directory for banks and datasets.
    #[arg(long)]
    pub out: PathBuf,
}

fn write_records(path: &Path, records: &[DatapointRecord]) -> Result<(), CliError> {
    save_dataset(records, path).map_err(data_error)
}

pub fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let seed = RunConfig::default().resolve_seed(args.seed)?;
    let mut spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
    if let Some(v) = args.images {
        spec.n_images = v;
    }
    if let Some(v) = args.visual_dim {
        spec.visual_dim = v;
    }
    if let Some(v) = args.language_dim {
        spec.language_dim = v;
    }
    if let Some(v) = args.signal {
        spec.cross_modal_signal = v;
    }
    if let Some(v) = args.foil_scale {
        spec.foil_perturbation_scale = v;
    }
    if let Some(v) = args.vqa_per_image {
        spec.vqa_per_image = v;
    }
    if let Some(v) = args.referit_per_image {
        spec.referit_per_image = v;
    }
    if let Some(v) = args.guesswhat_per_image {
        spec.guesswhat_per_image = v;
    }
    if let Some(v) = args.foil_pairs {
        spec.foil_pairs_per_image = v;
    }
    if let Some(v) = args.vqa_candidates {
        spec.vqa_candidates = v;
    }
    if let Some(v) = args.visual_candidates {
        spec.visual_candidates = v;
    }
    if let Some(v) = args.categories {
        spec.n_categories = v;
    }
    if let Some(v) = args.category_samples {
        spec.samples_per_category = v;
    }
    if args.no_scrambled {
        spec.with_scrambled = false;
    }

    let corpus = generate_corpus(&spec).map_err(data_error)?;
    std::fs::create_dir_all(&args.out).map_err(|e| crate::io_error(&args.out, e))?;
    let out = &args.out;
    corpus.visual_bank.save(&out.join("visual_bank.bin")).map_err(data_error)?;
    corpus.language_bank.save(&out.join("language_bank.bin")).map_err(data_error)?;
    write_records(&out.join("vqa.jsonl"), &corpus.vqa)?;
    write_records(&out.join("referit.jsonl"), &corpus.referit)?;
    write_records(&out.join("guesswhat.jsonl"), &corpus.guesswhat)?;
    write_records(&out.join("foil.jsonl"), &corpus.foil)?;
    if spec.n_categories > 0 {
        corpus
            .category_visual_bank
            .save(&out.join("category_visual_bank.bin"))
            .map_err(data_error)?;
        corpus
            .category_language_bank
            .save(&out.join("category_language_bank.bin"))
            .map_err(data_error)?;
    }
    println!(
        "gen: {} images; records vqa {} referit {} guesswhat {} foil {}; visual bank {}x{}, language bank {}x{}",
        spec.n_images,
        corpus.vqa.len(),
        corpus.referit.len(),
        corpus.guesswhat.len(),
        corpus.foil.len(),
        corpus.visual_bank.len(),
        corpus.visual_bank.dim(),
        corpus.language_bank.len(),
        corpus.language_bank.dim(),
    );
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vqa: PathBuf,
    #[arg(long)]
    pub referit: PathBuf,
    #[arg(long)]
    pub guesswhat: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_build_dataset(args: &BuildDatasetArgs) -> Result<(), CliError> {
    let seed = RunConfig::default().resolve_seed(args.seed)?;
    let vqa = crate::config::load_records(&args.vqa)?;
    let referit = crate::config::load_records(&args.referit)?;
    let guesswhat = crate::config::load_records(&args.guesswhat)?;
    let common = build_common_dataset(&vqa, &referit, &guesswhat, seed).map_err(data_error)?;
    std::fs::create_dir_all(&args.out).map_err(|e| crate::io_error(&args.out, e))?;
    write_records(&args.out.join("vqa_common.jsonl"), &common.vqa)?;
    write_records(&args.out.join("referit_common.jsonl"), &common.referit)?;
    write_records(&args.out.join("guesswhat_common.jsonl"), &common.guesswhat)?;
    println!(
        "build-dataset: {} records per task (vqa {}, referit {}, guesswhat {})",
        common.vqa.len(),
        common.vqa.len(),
        common.referit.len(),
        common.guesswhat.len(),
    );
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: PathBuf,
    /// One to three positive fractions summing to 1.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Output file prefix; defaults to the input file stem.
    #[arg(long)]
    pub prefix: Option<String>,
}

pub fn cmd_split(args: &SplitArgs) -> Result<(), CliError> {
    let seed = RunConfig::default().resolve_seed(args.seed)?;
    let records = crate::config::load_records(&args.data)?;
    let split = split_by_image(&records, &args.fractions, seed).map_err(data_error)?;
    std::fs::create_dir_all(&args.out).map_err(|e| crate::io_error(&args.out, e))?;
    let prefix = args.prefix.clone().unwrap_or_else(|| crate::config::stem(&args.data));
    let parts: [(&str, &[DatapointRecord]); 3] = [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ];
    let mut counts = Vec::new();
    for (name, records) in parts.iter().take(args.fractions.len()) {
        write_records(&args.out.join(format!("{prefix}_{name}.jsonl")), records)?;
        counts.push(format!("{name} {}", records.len()));
    }
    println!("split: {} records -> {}", records.len(), counts.join(", "));
    Ok(())
}
