//! The two training surfaces: single-stage `train` (retrieval pretraining
//! or a probe without evaluation extras) and `probe` (probe training with
//! test evaluation and optional replicas).

use crate::config::{
    output_dir, require_path, resolve_setting, ConfigArgs, LoadedBanks, RunConfig, TrainOverrides,
};
use crate::report::AnalysisReport;
use crate::{data_error, train_error, CliError};
use hubprobe::math::SeedStream;
use hubprobe::training::{
    evaluate_foil, pretrain_task, train_foil_probe, write_metric_log, Checkpoint, FoilEval,
    TrainConfig,
};
use std::path::PathBuf;

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// pretrained (with --task), pretrained-<task>, random, random2, or
    /// fully-foil.
    #[arg(long)]
    pub setting: Option<String>,
    /// Retrieval task for pretraining: vqa, referit, or guesswhat.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub visual_bank: Option<PathBuf>,
    #[arg(long)]
    pub language_bank: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
}

fn optimizer_steps(ckpt: &Checkpoint) -> u64 {
    ckpt.optimizer.as_ref().map(|o| o.steps).unwrap_or(0)
}

struct StageInputs {
    config: RunConfig,
    cfg: TrainConfig,
    banks: LoadedBanks,
    train: Vec<hubprobe::data::DatapointRecord>,
    validation: Vec<hubprobe::data::DatapointRecord>,
    out: PathBuf,
    seed: u64,
}

fn stage_inputs(
    common: &ConfigArgs,
    overrides: &TrainOverrides,
    train: &Option<PathBuf>,
    validation: &Option<PathBuf>,
    visual_bank: &Option<PathBuf>,
    language_bank: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<StageInputs, CliError> {
    let (mut config, seed) = common.load()?;
    overrides.apply(&mut config);
    let cfg = config.train_config(seed)?;
    let visual = require_path("visual-bank", visual_bank, &config.visual_bank)?;
    let language = require_path("language-bank", language_bank, &config.language_bank)?;
    let banks = LoadedBanks::load(&visual, &language)?;
    let train_path = require_path("train", train, &config.train_data)?;
    let validation_path = require_path("validation", validation, &config.validation_data)?;
    let train = crate::config::load_records(&train_path)?;
    let validation = crate::config::load_records(&validation_path)?;
    let out = output_dir(out, &config)?;
    Ok(StageInputs { config, cfg, banks, train, validation, out, seed })
}

fn save_run(
    out: &PathBuf,
    ckpt: &Checkpoint,
    mut report: AnalysisReport,
) -> Result<(), CliError> {
    ckpt.save(&out.join("checkpoint.bin")).map_err(data_error)?;
    write_metric_log(&out.join("metrics.csv"), &ckpt.log).map_err(data_error)?;
    report.files.push("checkpoint.bin".into());
    report.files.push("metrics.csv".into());
    report.metrics.insert("epochs_completed".into(), ckpt.epochs_completed as f64);
    report.metrics.insert("best_epoch".into(), ckpt.best_epoch as f64);
    report.metrics.insert("best_val_loss".into(), ckpt.best_val_loss);
    report.metrics.insert("optimizer_steps".into(), optimizer_steps(ckpt) as f64);
    report.save(out)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let inputs = stage_inputs(
        &args.common,
        &args.overrides,
        &args.train,
        &args.validation,
        &args.visual_bank,
        &args.language_bank,
        &args.out,
    )?;
    let setting_name = args
        .setting
        .clone()
        .or_else(|| inputs.config.setting.clone())
        .ok_or_else(|| CliError::Config("--setting is required".into()))?;
    let task_name = args.task.clone().or_else(|| inputs.config.task.clone());
    let setting = resolve_setting(&setting_name, task_name.as_deref())?;
    let dims = inputs.banks.dims(&inputs.config);
    let banks = inputs.banks.banks();

    let (ckpt, label) = match setting.pretrain_task() {
        Some(task) => {
            let ckpt =
                pretrain_task(&inputs.train, &inputs.validation, &banks, dims, &inputs.cfg)
                    .map_err(train_error)?;
            (ckpt, format!("pretrain-{}", task.name()))
        }
        None => {
            let ckpt = train_foil_probe(
                setting,
                None,
                &inputs.train,
                &inputs.validation,
                &banks,
                dims,
                &inputs.cfg,
            )
            .map_err(train_error)?;
            (ckpt, format!("probe-{}", setting.name()))
        }
    };

    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{label}-seed{}", inputs.seed));
    let report = AnalysisReport::new(
        run_id,
        Some(setting.name().to_string()),
        setting.pretrain_task().map(|t| t.name().to_string()),
        inputs.config.hash(),
    );
    println!(
        "train {}: {} epochs, best epoch {}, best val loss {:.6}, {} optimizer steps",
        setting.name(),
        ckpt.epochs_completed,
        ckpt.best_epoch,
        ckpt.best_val_loss,
        optimizer_steps(&ckpt),
    );
    save_run(&inputs.out, &ckpt, report)
}

#[derive(clap::Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub setting: Option<String>,
    /// Composes with `--setting pretrained` to pick the checkpoint task.
    #[arg(long)]
    pub task: Option<String>,
    /// Pretraining checkpoint; required for pretrained settings.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Evaluation set; falls back to the validation data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub visual_bank: Option<PathBuf>,
    #[arg(long)]
    pub language_bank: Option<PathBuf>,
    /// Replica count: best (by validation loss) and mean are reported.
    #[arg(long)]
    pub replicas: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
}

/// Replica 0 runs the base seed itself so `--replicas 1` matches a plain
/// run; later replicas draw fresh seeds from a dedicated substream.
fn replica_seed(base: u64, replica: u32) -> u64 {
    if replica == 0 {
        base
    } else {
        SeedStream::new(base).substream_indexed("replica", replica as u64).seed()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<(), CliError> {
    let inputs = stage_inputs(
        &args.common,
        &args.overrides,
        &args.train,
        &args.validation,
        &args.visual_bank,
        &args.language_bank,
        &args.out,
    )?;
    let setting_name = args
        .setting
        .clone()
        .or_else(|| inputs.config.setting.clone())
        .ok_or_else(|| CliError::Config("--setting is required".into()))?;
    let task_name = args.task.clone().or_else(|| inputs.config.task.clone());
    let setting = resolve_setting(&setting_name, task_name.as_deref())?;

    let pretrained = match setting.pretrain_task() {
        Some(task) => {
            let path = args.from.clone().or_else(|| inputs.config.checkpoint.clone()).ok_or_else(
                || {
                    CliError::Config(format!(
                        "setting {} needs --from <pretraining checkpoint for {}>",
                        setting.name(),
                        task.name()
                    ))
                },
            )?;
            Some(Checkpoint::load(&path).map_err(data_error)?)
        }
        None => None,
    };

    let eval_path = match &args.test {
        Some(path) => Some(path.clone()),
        None => inputs.config.test_data.clone(),
    };
    let eval_records = match eval_path {
        Some(path) => crate::config::load_records(&path)?,
        None => inputs.validation.clone(),
    };

    let replicas = args.replicas.or(Some(inputs.config.replicas)).unwrap_or(1).max(1);
    let banks = inputs.banks.banks();
    let dims = inputs.banks.dims(&inputs.config);

    let mut evals: Vec<FoilEval> = Vec::new();
    let mut best: Option<(Checkpoint, FoilEval)> = None;
    for replica in 0..replicas {
        let cfg = TrainConfig {
            seed: replica_seed(inputs.seed, replica),
            ..inputs.cfg.clone()
        };
        let ckpt = train_foil_probe(
            setting,
            pretrained.as_ref(),
            &inputs.train,
            &inputs.validation,
            &banks,
            dims,
            &cfg,
        )
        .map_err(train_error)?;
        let eval = evaluate_foil(&ckpt, &eval_records, &banks).map_err(train_error)?;
        println!(
            "probe {} replica {replica} (seed {}): accuracy {:.4}, best val loss {:.6}",
            setting.name(),
            cfg.seed,
            eval.overall,
            ckpt.best_val_loss,
        );
        let better = match &best {
            None => true,
            Some((current, _)) => ckpt.best_val_loss < current.best_val_loss,
        };
        if better {
            best = Some((ckpt, eval.clone()));
        }
        evals.push(eval);
    }
    let (best_ckpt, best_eval) = best.expect("at least one replica");

    let run_id = args.run_id.clone().unwrap_or_else(|| {
        format!("probe-{}-seed{}", setting.name(), inputs.seed)
    });
    let mut report = AnalysisReport::new(
        run_id,
        Some(setting.name().to_string()),
        task_name,
        inputs.config.hash(),
    );
    report.metrics.insert("accuracy_overall".into(), best_eval.overall);
    report.metrics.insert("accuracy_original".into(), best_eval.original_accuracy);
    report.metrics.insert("accuracy_foiled".into(), best_eval.foiled_accuracy);
    report.metrics.insert(
        "mean_accuracy_overall".into(),
        mean(&evals.iter().map(|e| e.overall).collect::<Vec<_>>()),
    );
    report.metrics.insert(
        "mean_accuracy_original".into(),
        mean(&evals.iter().map(|e| e.original_accuracy).collect::<Vec<_>>()),
    );
    report.metrics.insert(
        "mean_accuracy_foiled".into(),
        mean(&evals.iter().map(|e| e.foiled_accuracy).collect::<Vec<_>>()),
    );
    report.metrics.insert("replicas".into(), replicas as f64);
    report.metrics.insert("best_seed".into(), best_ckpt.seed as f64);
    println!(
        "probe {}: best accuracy {:.4} (original {:.4}, foiled {:.4}), mean accuracy {:.4} over {} replica(s)",
        setting.name(),
        best_eval.overall,
        best_eval.original_accuracy,
        best_eval.foiled_accuracy,
        report.metrics["mean_accuracy_overall"],
        replicas,
    );
    save_run(&inputs.out, &best_ckpt, report)
}
