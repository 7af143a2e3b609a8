//! The probe experiment battery over trained or frozen encoders: accuracy
//! over training epochs, accuracy under shrinking training data, accuracy
//! across decision thresholds, and statistics linking per-datapoint success
//! to metadata covariates.

use crate::data::record::DatapointRecord;
use crate::data::{subset_fraction, DataError};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::heads::FoilHead;
use crate::math::linalg::Matrix;
use crate::math::stats::{pearson, spearman};
use crate::math::{AdamHyper, AdamState, StatsError};
use crate::training::{
    evaluate_foil, evaluate_foil_parts, foil_predictions, initial_foil_head, prepare_foil,
    setting_encoder, train_foil_probe, Banks, Checkpoint, FoilPrediction, FoilTrainer,
    PreparedFoil, RunSetting, TrainConfig, TrainError,
};
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ProbeError {
    Train(TrainError),
    Stats(StatsError),
    Data(DataError),
    /// The requested covariate never appears in the record metadata.
    MissingCovariate { name: String },
    LengthMismatch { left: usize, right: usize },
    BadInput { detail: String },
    /// Trajectory experiments need a setting that actually trains.
    UntrainableSetting(RunSetting),
}

impl fmt::Display for ProbeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeError::Train(e) => write!(f, "{e}"),
            ProbeError::Stats(e) => write!(f, "{e}"),
            ProbeError::Data(e) => write!(f, "{e}"),
            ProbeError::MissingCovariate { name } => {
                write!(f, "covariate {name:?} not present in any record")
            }
            ProbeError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            ProbeError::BadInput { detail } => write!(f, "{detail}"),
            ProbeError::UntrainableSetting(setting) => {
                write!(f, "setting {setting} performs no training")
            }
        }
    }
}

impl std::error::Error for ProbeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ProbeError::Train(e) => Some(e),
            ProbeError::Stats(e) => Some(e),
            ProbeError::Data(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TrainError> for ProbeError {
    fn from(e: TrainError) -> Self {
        ProbeError::Train(e)
    }
}

impl From<StatsError> for ProbeError {
    fn from(e: StatsError) -> Self {
        ProbeError::Stats(e)
    }
}

impl From<DataError> for ProbeError {
    fn from(e: DataError) -> Self {
        ProbeError::Data(e)
    }
}

/// One point of a figure series: accuracy (or loss) `y` at position `x`
/// (epoch, training fraction, or threshold), labelled by setting.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

// ── Learning curve ───────────────────────────────────────────────────────────

/// Test accuracy over the first `horizon` probe-training epochs, including
/// an epoch-0 point measured before any parameter update. No early stopping
/// applies inside the horizon; `cfg.max_epochs` and `cfg.patience` are
/// ignored here.
pub fn learning_curve(
    setting: RunSetting,
    pretrained: Option<&Checkpoint>,
    train: &[DatapointRecord],
    test: &[DatapointRecord],
    banks: &Banks<'_>,
    dims: EncoderDims,
    cfg: &TrainConfig,
    horizon: u32,
) -> Result<Vec<CurvePoint>, ProbeError> {
    if horizon == 0 {
        return Err(ProbeError::BadInput { detail: "horizon must be at least 1".into() });
    }
    if !setting.trains_probe() {
        return Err(ProbeError::UntrainableSetting(setting));
    }
    cfg.validate()?;
    banks.check_dims(&dims)?;
    let train_data = prepare_foil(train, banks)?;
    let test_data = prepare_foil(test, banks)?;
    let encoder = setting_encoder(setting, pretrained, dims, cfg)?;
    let head = initial_foil_head(dims, cfg);

    let mut points = Vec::with_capacity(horizon as usize + 1);
    let series = setting.name().to_string();
    let epoch0 = evaluate_foil_parts(&encoder, &head, &test_data)?.overall;
    points.push(CurvePoint { series: series.clone(), x: 0.0, y: epoch0 });

    let mut trainer = FoilTrainer::new(encoder, head, setting.frozen_encoder(), cfg)?;
    for epoch in 1..=horizon {
        trainer.epoch(&train_data, epoch)?;
        let accuracy = trainer.evaluate(&test_data)?.overall;
        points.push(CurvePoint { series: series.clone(), x: epoch as f64, y: accuracy });
    }
    Ok(points)
}

// ── Data-size ablation ───────────────────────────────────────────────────────

pub const DEFAULT_FRACTIONS: [f64; 7] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0];

/// Test accuracy of a freshly trained probe per training-set fraction.
/// Fractions select images (nested across fractions for one seed), only the
/// training part shrinks, and the test set stays fixed. Each cell runs the
/// full probe protocol with early stopping.
pub fn data_size_ablation(
    setting: RunSetting,
    pretrained: Option<&Checkpoint>,
    train: &[DatapointRecord],
    validation: &[DatapointRecord],
    test: &[DatapointRecord],
    banks: &Banks<'_>,
    dims: EncoderDims,
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<CurvePoint>, ProbeError> {
    if fractions.is_empty() {
        return Err(ProbeError::BadInput { detail: "need at least one fraction".into() });
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProbeError::BadInput {
            detail: format!("fractions {fractions:?} must be strictly ascending"),
        });
    }
    if !setting.trains_probe() {
        return Err(ProbeError::UntrainableSetting(setting));
    }
    let series = setting.name().to_string();
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = subset_fraction(train, fraction, cfg.seed)?;
        let ckpt =
            train_foil_probe(setting, pretrained, &subset, validation, banks, dims, cfg)?;
        let accuracy = evaluate_foil(&ckpt, test, banks)?.overall;
        points.push(CurvePoint { series: series.clone(), x: fraction, y: accuracy });
    }
    Ok(points)
}

// ── Confidence sweep ─────────────────────────────────────────────────────────

/// Accuracy as the decision threshold rises from 0.50 to 0.70 in steps of
/// 0.01, plus the normalized area under that curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSweep {
    pub thresholds: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub auc: f64,
}

/// A datapoint counts as correct at threshold `t` when the predicted class
/// is the true class and the true class's probability is at least `t`;
/// sub-threshold predictions count as incorrect rather than abstentions.
pub fn confidence_sweep_from_predictions(
    predictions: &[FoilPrediction],
) -> Result<ConfidenceSweep, ProbeError> {
    if predictions.is_empty() {
        return Err(ProbeError::Train(TrainError::EmptyDataset));
    }
    let thresholds: Vec<f64> = (50..=70).map(|p| p as f64 / 100.0).collect();
    let n = predictions.len() as f64;
    let accuracies: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let hits = predictions
                .iter()
                .filter(|p| p.correct() && p.probabilities[p.label] >= t)
                .count();
            hits as f64 / n
        })
        .collect();
    // trapezoidal area normalized by the accumulated threshold width, so a
    // constant accuracy of a sweeps to exactly a
    let mut area = 0.0;
    let mut width = 0.0;
    for i in 1..thresholds.len() {
        let w = thresholds[i] - thresholds[i - 1];
        area += w * (accuracies[i] + accuracies[i - 1]) / 2.0;
        width += w;
    }
    Ok(ConfidenceSweep { thresholds, accuracies, auc: area / width })
}

pub fn confidence_sweep_parts(
    encoder: &EncoderParams,
    head: &FoilHead,
    data: &PreparedFoil,
) -> Result<ConfidenceSweep, ProbeError> {
    confidence_sweep_from_predictions(&foil_predictions(encoder, head, data)?)
}

pub fn confidence_sweep(
    ckpt: &Checkpoint,
    records: &[DatapointRecord],
    banks: &Banks<'_>,
) -> Result<ConfidenceSweep, ProbeError> {
    let head = ckpt.head.foil().ok_or_else(|| {
        ProbeError::Train(TrainError::WrongCheckpoint {
            detail: "confidence sweep needs a probe checkpoint".into(),
        })
    })?;
    confidence_sweep_parts(&ckpt.encoder, head, &prepare_foil(records, banks)?)
}

// ── Success statistics ───────────────────────────────────────────────────────

/// Per-datapoint success indicators of a probe checkpoint, aligned with
/// `records`.
pub fn probe_success_bits(
    ckpt: &Checkpoint,
    records: &[DatapointRecord],
    banks: &Banks<'_>,
) -> Result<Vec<bool>, ProbeError> {
    let head = ckpt.head.foil().ok_or_else(|| {
        ProbeError::Train(TrainError::WrongCheckpoint {
            detail: "success bits need a probe checkpoint".into(),
        })
    })?;
    let data = prepare_foil(records, banks)?;
    Ok(foil_predictions(&ckpt.encoder, head, &data)?.iter().map(|p| p.correct()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCorrelation {
    pub pearson: f64,
    pub spearman: f64,
    /// Datapoints that actually carried the covariate.
    pub n: usize,
}

/// Correlates the success indicator with a numeric metadata covariate,
/// skipping records that lack it.
pub fn correlate_success(
    success: &[bool],
    covariate: &str,
    records: &[DatapointRecord],
) -> Result<SuccessCorrelation, ProbeError> {
    if success.len() != records.len() {
        return Err(ProbeError::LengthMismatch { left: success.len(), right: records.len() });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (ok, record) in success.iter().zip(records) {
        if let Some(value) = record.meta_value(covariate) {
            xs.push(if *ok { 1.0 } else { 0.0 });
            ys.push(value);
        }
    }
    if xs.is_empty() {
        return Err(ProbeError::MissingCovariate { name: covariate.to_string() });
    }
    Ok(SuccessCorrelation {
        pearson: pearson(&xs, &ys)?,
        spearman: spearman(&xs, &ys)?,
        n: xs.len(),
    })
}

// ── Logistic regression on success ───────────────────────────────────────────

const LOGISTIC_L2: f64 = 1e-4;
const LOGISTIC_LR: f64 = 0.05;
const LOGISTIC_MAX_STEPS: u64 = 10_000;
const LOGISTIC_TOLERANCE: f64 = 1e-6;
/// Coefficients past this magnitude only arise when the likelihood keeps
/// pushing against the L2 penalty, i.e. under (near-)perfect separation.
const SEPARATION_MAGNITUDE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub steps: u64,
    pub gradient_norm: f64,
    /// Set when a coefficient grew past [`SEPARATION_MAGNITUDE`]; the fit is
    /// still reported.
    pub separation: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits `P(success) = sigmoid(intercept + features . w)` by full-batch Adam
/// on the mean negative log-likelihood with an L2 penalty of 1e-4 on the
/// coefficients (never the intercept), from a zero start, until the gradient
/// norm drops below 1e-6 or 10k steps pass. Deterministic.
pub fn logistic_success_regression(
    success: &[bool],
    features: &Matrix,
) -> Result<LogisticFit, ProbeError> {
    let n = success.len();
    let p = features.cols();
    if features.rows() != n {
        return Err(ProbeError::LengthMismatch { left: n, right: features.rows() });
    }
    if n < p + 1 {
        return Err(ProbeError::BadInput {
            detail: format!("{n} observations cannot identify {p} coefficients plus intercept"),
        });
    }
    if !features.as_slice().iter().all(|v| v.is_finite()) {
        return Err(ProbeError::BadInput { detail: "features must be finite".into() });
    }

    let mut params = vec![0.0; p + 1]; // [intercept, coefficients...]
    let mut grads = vec![0.0; p + 1];
    let mut adam = AdamState::new(p + 1, AdamHyper::with_learning_rate(LOGISTIC_LR));
    let inv_n = 1.0 / n as f64;
    let mut gradient_norm = f64::INFINITY;
    while adam.steps() < LOGISTIC_MAX_STEPS {
        grads.iter_mut().for_each(|g| *g = 0.0);
        for (i, ok) in success.iter().enumerate() {
            let row = features.row(i);
            let z = params[0]
                + row.iter().zip(&params[1..]).map(|(x, w)| x * w).sum::<f64>();
            let residual = sigmoid(z) - if *ok { 1.0 } else { 0.0 };
            grads[0] += residual;
            for (g, x) in grads[1..].iter_mut().zip(row) {
                *g += residual * x;
            }
        }
        for j in 0..=p {
            grads[j] *= inv_n;
        }
        for j in 1..=p {
            grads[j] += LOGISTIC_L2 * params[j];
        }
        gradient_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gradient_norm < LOGISTIC_TOLERANCE {
            break;
        }
        adam.step(&mut params, &grads).map_err(|e| ProbeError::Train(e.into()))?;
    }
    let separation = params[1..].iter().any(|c| c.abs() > SEPARATION_MAGNITUDE);
    Ok(LogisticFit {
        intercept: params[0],
        coefficients: params[1..].to_vec(),
        steps: adam.steps(),
        gradient_norm,
        separation,
    })
}

// ── CSV emission ─────────────────────────────────────────────────────────────

/// Curve series as `series,x,y` rows (atomic write).
pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<(), DataError> {
    let mut out = String::from("series,x,y\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.series, p.x, p.y));
    }
    crate::data::atomic_write(path, out.as_bytes())
}

/// Sweep as `threshold,accuracy` rows; the AUC belongs in the run report.
pub fn write_confidence_csv(path: &Path, sweep: &ConfidenceSweep) -> Result<(), DataError> {
    let mut out = String::from("threshold,accuracy\n");
    for (t, a) in sweep.thresholds.iter().zip(&sweep.accuracies) {
        out.push_str(&format!("{t},{a}\n"));
    }
    crate::data::atomic_write(path, out.as_bytes())
}
