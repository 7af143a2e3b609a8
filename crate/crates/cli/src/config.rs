//! Run configuration: TOML manifest, flag overrides, and seed resolution.
//! Flags beat the file; the seed additionally falls back to $HUBPROBE_SEED
//! and is never defaulted from the clock.

use crate::{data_error, train_error, CliError};
use hubprobe::analysis::DENSITY_SAMPLE;
use hubprobe::data::record::Task;
use hubprobe::data::{load_dataset, DatapointRecord, EmbeddingBank};
use hubprobe::encoder::EncoderDims;
use hubprobe::heads::{Aggregation, LossConfig};
use hubprobe::math::rng::fnv1a64_str;
use hubprobe::probing::DEFAULT_FRACTIONS;
use hubprobe::training::{Banks, RunSetting, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "HUBPROBE_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub setting: Option<String>,
    pub task: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub visual_bank: Option<PathBuf>,
    pub language_bank: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub validation_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: u32,
    pub max_epochs: u32,
    pub eval_every: u32,
    pub head_hidden: Option<usize>,
    pub use_bias: bool,
    pub margin: f64,
    pub aggregation: String,
    pub projected_dim: usize,
    pub hidden_dim: usize,
    pub fractions: Vec<f64>,
    pub sample_size: usize,
    pub horizon: u32,
    pub replicas: u32,
    pub k: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::with_seed(0);
        let dims = EncoderDims::default();
        RunConfig {
            seed: None,
            setting: None,
            task: None,
            output_dir: None,
            visual_bank: None,
            language_bank: None,
            train_data: None,
            validation_data: None,
            test_data: None,
            checkpoint: None,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            patience: train.patience,
            max_epochs: train.max_epochs,
            eval_every: train.eval_every,
            head_hidden: None,
            use_bias: train.use_bias,
            margin: train.loss.margin,
            aggregation: "mean".into(),
            projected_dim: dims.projected,
            hidden_dim: dims.hidden,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            sample_size: DENSITY_SAMPLE,
            horizon: 50,
            replicas: 1,
            k: vec![1, 10],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| crate::io_error(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// FNV-1a over the canonical JSON rendering of the merged config, so key
    /// order in the manifest never changes the hash.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        format!("{:016x}", fnv1a64_str(&value.to_string()))
    }

    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(seed) = flag {
            return Ok(seed);
        }
        if let Some(seed) = self.seed {
            return Ok(seed);
        }
        if let Ok(text) = std::env::var(SEED_ENV) {
            return text
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={text:?} is not a u64")));
        }
        Err(CliError::Config(
            "no seed given: pass --seed, set `seed` in the config file, or export HUBPROBE_SEED"
                .into(),
        ))
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let aggregation = match self.aggregation.as_str() {
            "mean" => Aggregation::Mean,
            "sum" => Aggregation::Sum,
            other => {
                return Err(CliError::Config(format!(
                    "unknown aggregation {other:?} (expected mean or sum)"
                )))
            }
        };
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            head_hidden: self.head_hidden,
            use_bias: self.use_bias,
            loss: LossConfig { margin: self.margin, aggregation },
            ..TrainConfig::with_seed(seed)
        };
        cfg.validate().map_err(train_error)?;
        Ok(cfg)
    }
}

/// Shared --config/--seed pair most subcommands start from.
#[derive(clap::Args, Debug)]
pub struct ConfigArgs {
    /// TOML run manifest; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; falls back to the config file, then $HUBPROBE_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<(RunConfig, u64), CliError> {
        let config = RunConfig::load(self.config.as_deref())?;
        let seed = config.resolve_seed(self.seed)?;
        Ok((config, seed))
    }
}

/// Hyperparameter flags shared by the training-flavoured subcommands.
/// Each one overrides the config-file value before the run (and therefore
/// before the config hash is taken).
#[derive(clap::Args, Debug)]
pub struct TrainOverrides {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Eval points without improvement before stopping.
    #[arg(long)]
    pub patience: Option<u32>,
    #[arg(long)]
    pub max_epochs: Option<u32>,
    /// Validate every N epochs (epoch 1 always validates).
    #[arg(long)]
    pub eval_every: Option<u32>,
    /// Hidden width of the classifier head; omit for the affine head.
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Hinge aggregation: mean or sum.
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub projected_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.patience {
            config.patience = v;
        }
        if let Some(v) = self.max_epochs {
            config.max_epochs = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
        if let Some(v) = self.head_hidden {
            config.head_hidden = Some(v);
        }
        if let Some(v) = self.margin {
            config.margin = v;
        }
        if let Some(v) = &self.aggregation {
            config.aggregation = v.clone();
        }
        if let Some(v) = self.projected_dim {
            config.projected_dim = v;
        }
        if let Some(v) = self.hidden_dim {
            config.hidden_dim = v;
        }
    }
}

pub fn require_path(
    name: &str,
    flag: &Option<PathBuf>,
    fallback: &Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let path = flag
        .clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("--{name} is required (flag or config file)")))?;
    if !path.exists() {
        return Err(CliError::Io(format!("{name} path does not exist: {}", path.display())));
    }
    Ok(path)
}

/// Output directory: flag, then config, then the current directory.
pub fn output_dir(flag: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = flag
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| crate::io_error(&dir, e))?;
    Ok(dir)
}

pub struct LoadedBanks {
    pub visual: EmbeddingBank,
    pub language: EmbeddingBank,
}

impl LoadedBanks {
    pub fn load(visual: &Path, language: &Path) -> Result<LoadedBanks, CliError> {
        Ok(LoadedBanks {
            visual: EmbeddingBank::load(visual).map_err(data_error)?,
            language: EmbeddingBank::load(language).map_err(data_error)?,
        })
    }

    pub fn banks(&self) -> Banks<'_> {
        Banks { visual: &self.visual, language: &self.language }
    }

    /// Encoder dimensions implied by the banks plus configured widths.
    pub fn dims(&self, config: &RunConfig) -> EncoderDims {
        EncoderDims {
            visual: self.visual.dim(),
            language: self.language.dim(),
            projected: config.projected_dim,
            hidden: config.hidden_dim,
        }
    }
}

pub fn load_records(path: &Path) -> Result<Vec<DatapointRecord>, CliError> {
    load_dataset(path).map_err(data_error)
}

/// Maps a setting flag to a run setting, composing `pretrained` with
/// `--task`.
pub fn resolve_setting(setting: &str, task: Option<&str>) -> Result<RunSetting, CliError> {
    if setting == "pretrained" {
        let name = task.ok_or_else(|| {
            CliError::Config("--setting pretrained needs --task vqa|referit|guesswhat".into())
        })?;
        return match Task::parse(name) {
            Some(Task::Vqa) => Ok(RunSetting::PretrainedVqa),
            Some(Task::Referit) => Ok(RunSetting::PretrainedReferit),
            Some(Task::Guesswhat) => Ok(RunSetting::PretrainedGuesswhat),
            _ => Err(CliError::Config(format!(
                "cannot pretrain on task {name:?}; expected vqa, referit, or guesswhat"
            ))),
        };
    }
    RunSetting::parse(setting).ok_or_else(|| {
        let names: Vec<&str> = RunSetting::ALL.iter().map(|s| s.name()).collect();
        CliError::Config(format!(
            "unknown setting {setting:?} (expected pretrained or one of {})",
            names.join(", ")
        ))
    })
}

/// File stem used to label spaces and reports after their source files.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "space".into())
}
