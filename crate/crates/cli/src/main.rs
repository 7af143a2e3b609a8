//! hubprobe: generate synthetic corpora, run the training protocols, and
//! emit the experiment figures and reports as CSV files.

mod config;
mod data_cmds;
mod figure_cmds;
mod report;
mod space_cmds;
mod stat_cmds;
mod train_cmds;

use clap::{Parser, Subcommand};
use hubprobe::analysis::AnalysisError;
use hubprobe::data::DataError;
use hubprobe::encoder::ModelError;
use hubprobe::probing::ProbeError;
use hubprobe::training::TrainError;
use std::fmt;
use std::process::ExitCode;

/// Errors bucketed by exit code: 2 configuration, 3 I/O, 4 data,
/// 5 numeric failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Data(m) | CliError::Numeric(m) => {
                f.write_str(m)
            }
        }
    }
}

pub fn data_error(e: DataError) -> CliError {
    match e {
        DataError::Io { .. } => CliError::Io(e.to_string()),
        DataError::NotFinite { .. } => CliError::Numeric(e.to_string()),
        DataError::BadSpec { .. } | DataError::BadFractions { .. } | DataError::BadFraction { .. } => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

pub fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Data(inner) => data_error(inner),
        TrainError::BadConfig { .. } | TrainError::WrongCheckpoint { .. } => {
            CliError::Config(e.to_string())
        }
        TrainError::Model(_) | TrainError::Head(_) => CliError::Config(e.to_string()),
        TrainError::NotFinite { .. } => CliError::Numeric(e.to_string()),
        TrainError::EmptyDataset
        | TrainError::MissingEmbedding { .. }
        | TrainError::TaskMismatch { .. } => CliError::Data(e.to_string()),
    }
}

pub fn probe_error(e: ProbeError) -> CliError {
    match e {
        ProbeError::Train(inner) => train_error(inner),
        ProbeError::Data(inner) => data_error(inner),
        ProbeError::BadInput { .. } | ProbeError::UntrainableSetting(_) => {
            CliError::Config(e.to_string())
        }
        ProbeError::Stats(_) | ProbeError::MissingCovariate { .. } | ProbeError::LengthMismatch { .. } => {
            CliError::Data(e.to_string())
        }
    }
}

pub fn analysis_error(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::Data(inner) => data_error(inner),
        AnalysisError::Model(_) | AnalysisError::BadK { .. } | AnalysisError::TooSmall { .. } => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

pub fn model_error(e: ModelError) -> CliError {
    CliError::Config(e.to_string())
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "hubprobe", version, about = "Multimodal hub encoder experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: embedding banks plus per-task datasets.
    Gen(data_cmds::GenArgs),
    /// Balance the three retrieval datasets onto their common images.
    BuildDataset(data_cmds::BuildDatasetArgs),
    /// Split a dataset into train/validation/test at the image level.
    Split(data_cmds::SplitArgs),
    /// Train one stage: retrieval pretraining or a classifier probe.
    Train(train_cmds::TrainArgs),
    /// Train and evaluate a classifier probe, optionally over replicas.
    Probe(train_cmds::ProbeArgs),
    /// Accuracy over training epochs for one or more settings.
    Curve(figure_cmds::CurveArgs),
    /// Accuracy against shrinking training-set fractions.
    Ablate(figure_cmds::AblateArgs),
    /// Accuracy across decision-confidence thresholds.
    Confidence(figure_cmds::ConfidenceArgs),
    /// Similarity-structure correlation between representation spaces.
    Rsa(space_cmds::RsaArgs),
    /// Category-level nearest-neighbour overlap between spaces.
    NnOverlap(space_cmds::NnOverlapArgs),
    /// Average pairwise cosine similarity of an embedding bank.
    Density(space_cmds::DensityArgs),
    /// Correlate probe success with metadata covariates.
    Correlate(stat_cmds::CorrelateArgs),
    /// Logistic regression of probe success on metadata covariates.
    Regress(stat_cmds::RegressArgs),
    /// Consolidate completed runs into the per-setting accuracy table.
    Report(report::ReportArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(args) => data_cmds::cmd_gen(&args),
        Command::BuildDataset(args) => data_cmds::cmd_build_dataset(&args),
        Command::Split(args) => data_cmds::cmd_split(&args),
        Command::Train(args) => train_cmds::cmd_train(&args),
        Command::Probe(args) => train_cmds::cmd_probe(&args),
        Command::Curve(args) => figure_cmds::cmd_curve(&args),
        Command::Ablate(args) => figure_cmds::cmd_ablate(&args),
        Command::Confidence(args) => figure_cmds::cmd_confidence(&args),
        Command::Rsa(args) => space_cmds::cmd_rsa(&args),
        Command::NnOverlap(args) => space_cmds::cmd_nn_overlap(&args),
        Command::Density(args) => space_cmds::cmd_density(&args),
        Command::Correlate(args) => stat_cmds::cmd_correlate(&args),
        Command::Regress(args) => stat_cmds::cmd_regress(&args),
        Command::Report(args) => report::cmd_report(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
