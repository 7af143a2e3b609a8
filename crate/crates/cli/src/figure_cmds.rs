//! Figure-analogue CSVs: learning curves, data-size ablation, and the
//! confidence sweep. Curve and ablate fan independent cells out over
//! `--jobs` worker threads.

use crate::config::{
    output_dir, require_path, resolve_setting, ConfigArgs, LoadedBanks, TrainOverrides,
};
use crate::{data_error, probe_error, CliError};
use hubprobe::data::record::Task;
use hubprobe::data::DatapointRecord;
use hubprobe::probing::{
    confidence_sweep, data_size_ablation, learning_curve, write_confidence_csv, write_curve_csv,
    CurvePoint,
};
use hubprobe::encoder::EncoderDims;
use hubprobe::training::{Checkpoint, RunSetting, TrainConfig};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `cell(0..n)` on up to `jobs` threads; results keep cell order and
/// the first failing cell (by index) decides the error.
fn run_cells<T, F>(n: usize, jobs: usize, cell: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let workers = jobs.max(1).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(cell).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T, CliError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = cell(i);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("cell executed"))
        .collect()
}

/// The per-setting inputs shared by curve and ablate: which settings run
/// and the pretraining checkpoint each one starts from.
#[derive(clap::Args, Debug)]
pub struct CellArgs {
    /// Comma-separated run settings (random, pretrained-vqa, ..., fully-foil).
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("random")])]
    pub settings: Vec<String>,
    #[arg(long)]
    pub from_vqa: Option<PathBuf>,
    #[arg(long)]
    pub from_referit: Option<PathBuf>,
    #[arg(long)]
    pub from_guesswhat: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

struct Cells {
    settings: Vec<RunSetting>,
    checkpoints: Vec<Option<Checkpoint>>,
}

impl CellArgs {
    fn load(&self) -> Result<Cells, CliError> {
        let mut settings = Vec::new();
        let mut checkpoints = Vec::new();
        for name in &self.settings {
            let setting = resolve_setting(name, None)?;
            let ckpt = match setting.pretrain_task() {
                None => None,
                Some(task) => {
                    let flag = match task {
                        Task::Vqa => &self.from_vqa,
                        Task::Referit => &self.from_referit,
                        Task::Guesswhat => &self.from_guesswhat,
                        Task::Foil => &None,
                    };
                    let path = flag.clone().ok_or_else(|| {
                        CliError::Config(format!(
                            "setting {} needs --from-{}",
                            setting.name(),
                            task.name()
                        ))
                    })?;
                    Some(Checkpoint::load(&path).map_err(data_error)?)
                }
            };
            settings.push(setting);
            checkpoints.push(ckpt);
        }
        Ok(Cells { settings, checkpoints })
    }
}

#[derive(clap::Args, Debug)]
pub struct CurveArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[command(flatten)]
    pub cells: CellArgs,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Accuracy is measured on this set after every epoch.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub visual_bank: Option<PathBuf>,
    #[arg(long)]
    pub language_bank: Option<PathBuf>,
    /// Epochs to train past the epoch-0 measurement.
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct FigureInputs {
    cfg: TrainConfig,
    banks: LoadedBanks,
    dims: EncoderDims,
    train: Vec<DatapointRecord>,
    out: PathBuf,
    config: crate::config::RunConfig,
}

fn figure_inputs(
    common: &ConfigArgs,
    overrides: &TrainOverrides,
    train: &Option<PathBuf>,
    visual_bank: &Option<PathBuf>,
    language_bank: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<FigureInputs, CliError> {
    let (mut config, seed) = common.load()?;
    overrides.apply(&mut config);
    let cfg = config.train_config(seed)?;
    let visual = require_path("visual-bank", visual_bank, &config.visual_bank)?;
    let language = require_path("language-bank", language_bank, &config.language_bank)?;
    let banks = LoadedBanks::load(&visual, &language)?;
    let dims = banks.dims(&config);
    let train_path = require_path("train", train, &config.train_data)?;
    let train = crate::config::load_records(&train_path)?;
    let out = output_dir(out, &config)?;
    Ok(FigureInputs { cfg, banks, dims, train, out, config })
}

pub fn cmd_curve(args: &CurveArgs) -> Result<(), CliError> {
    let inputs = figure_inputs(
        &args.common,
        &args.overrides,
        &args.train,
        &args.visual_bank,
        &args.language_bank,
        &args.out,
    )?;
    let cells = args.cells.load()?;
    let test_path = require_path("test", &args.test, &inputs.config.test_data)?;
    let test = crate::config::load_records(&test_path)?;
    let horizon = args.horizon.unwrap_or(inputs.config.horizon);
    let banks = inputs.banks.banks();

    let results = run_cells(cells.settings.len(), args.cells.jobs, |i| {
        learning_curve(
            cells.settings[i],
            cells.checkpoints[i].as_ref(),
            &inputs.train,
            &test,
            &banks,
            inputs.dims,
            &inputs.cfg,
            horizon,
        )
        .map_err(probe_error)
    })?;
    let points: Vec<CurvePoint> = results.into_iter().flatten().collect();
    let path = inputs.out.join("epochs.csv");
    write_curve_csv(&path, &points).map_err(data_error)?;
    println!(
        "curve: {} setting(s), horizon {horizon} -> {} ({} points)",
        cells.settings.len(),
        path.display(),
        points.len(),
    );
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[command(flatten)]
    pub cells: CellArgs,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub visual_bank: Option<PathBuf>,
    #[arg(long)]
    pub language_bank: Option<PathBuf>,
    /// Strictly ascending training-set fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let inputs = figure_inputs(
        &args.common,
        &args.overrides,
        &args.train,
        &args.visual_bank,
        &args.language_bank,
        &args.out,
    )?;
    let cells = args.cells.load()?;
    let validation_path = require_path("validation", &args.validation, &inputs.config.validation_data)?;
    let validation = crate::config::load_records(&validation_path)?;
    let test_path = require_path("test", &args.test, &inputs.config.test_data)?;
    let test = crate::config::load_records(&test_path)?;
    let fractions = args.fractions.clone().unwrap_or_else(|| inputs.config.fractions.clone());
    if fractions.is_empty() || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config(format!(
            "fractions {fractions:?} must be non-empty and strictly ascending"
        )));
    }
    let banks = inputs.banks.banks();

    // one cell per (setting, fraction): subsets nest per seed, so cells stay
    // independent of evaluation order
    let n = cells.settings.len() * fractions.len();
    let results = run_cells(n, args.cells.jobs, |i| {
        let setting = cells.settings[i / fractions.len()];
        let ckpt = cells.checkpoints[i / fractions.len()].as_ref();
        let fraction = fractions[i % fractions.len()];
        data_size_ablation(
            setting,
            ckpt,
            &inputs.train,
            &validation,
            &test,
            &banks,
            inputs.dims,
            &[fraction],
            &inputs.cfg,
        )
        .map_err(probe_error)
    })?;
    let points: Vec<CurvePoint> = results.into_iter().flatten().collect();
    let path = inputs.out.join("datasize.csv");
    write_curve_csv(&path, &points).map_err(data_error)?;
    println!(
        "ablate: {} setting(s) x {} fraction(s) -> {} ({} points)",
        cells.settings.len(),
        fractions.len(),
        path.display(),
        points.len(),
    );
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct ConfidenceArgs {
    /// Probe checkpoint to sweep.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub visual_bank: PathBuf,
    #[arg(long)]
    pub language_bank: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn cmd_confidence(args: &ConfidenceArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(data_error)?;
    let banks = LoadedBanks::load(&args.visual_bank, &args.language_bank)?;
    let records = crate::config::load_records(&args.data)?;
    let sweep = confidence_sweep(&ckpt, &records, &banks.banks()).map_err(probe_error)?;
    std::fs::create_dir_all(&args.out).map_err(|e| crate::io_error(&args.out, e))?;
    let path = args.out.join("confidence.csv");
    write_confidence_csv(&path, &sweep).map_err(data_error)?;
    println!(
        "confidence: accuracy at 0.50 = {:.4}, at 0.70 = {:.4}, AUC = {:.4} -> {}",
        sweep.accuracies[0],
        sweep.accuracies[sweep.accuracies.len() - 1],
        sweep.auc,
        path.display(),
    );
    Ok(())
}
