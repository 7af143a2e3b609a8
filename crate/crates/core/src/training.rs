//! Experiment protocols: the four run settings, seed-shared initialization,
//! frozen-encoder probes, batched Adam training with early stopping,
//! retrieval/classification evaluation, and checkpoint persistence.
//!
//! All settings of a given seed start from the same encoder weights
//! ([`initial_encoder`]); what differs is which parameter groups the
//! optimizer sees. Frozen probes never put encoder parameters into the
//! optimizer vector, so freezing is bitwise by construction rather than by
//! a learning-rate hack.

use crate::data::record::{DatapointRecord, Task};
use crate::data::{DataError, EmbeddingBank};
use crate::encoder::{init_encoder, EncoderDims, EncoderParams, ModelError};
use crate::heads::{
    rank_candidates, retrieval_loss, FoilHead, HeadError, LossConfig, RetrievalHead,
};
use crate::math::linalg::Matrix;
use crate::math::{AdamHyper, AdamState, Affine, MathError, SeedStream, Vector};
use rand::seq::SliceRandom;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    /// A record references an id the bank does not hold.
    MissingEmbedding { id: String },
    TaskMismatch { expected: Task, got: Task },
    /// The supplied checkpoint does not fit the requested run.
    WrongCheckpoint { detail: String },
    BadConfig { detail: String },
    /// A loss or metric left the finite range.
    NotFinite { what: String },
    Model(ModelError),
    Head(HeadError),
    Data(DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset is empty"),
            TrainError::MissingEmbedding { id } => {
                write!(f, "no embedding for id {id:?}")
            }
            TrainError::TaskMismatch { expected, got } => {
                write!(f, "expected {expected} records, got {got}")
            }
            TrainError::WrongCheckpoint { detail } => write!(f, "wrong checkpoint: {detail}"),
            TrainError::BadConfig { detail } => write!(f, "bad train config: {detail}"),
            TrainError::NotFinite { what } => write!(f, "{what} is not finite"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Head(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Model(e) => Some(e),
            TrainError::Head(e) => Some(e),
            TrainError::Data(e) => Some(e),
            _ => None,
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<HeadError> for TrainError {
    fn from(e: HeadError) -> Self {
        TrainError::Head(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<MathError> for TrainError {
    fn from(e: MathError) -> Self {
        TrainError::Model(ModelError::Math(e))
    }
}

// ── Run settings ─────────────────────────────────────────────────────────────

/// The probing conditions. `Random2` evaluates an untrained classifier on a
/// frozen random encoder; `Random` trains only the classifier; `Pretrained*`
/// train the classifier on an encoder taken from a retrieval pretraining
/// checkpoint; `FullyFoil` trains everything end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunSetting {
    Random2,
    Random,
    PretrainedVqa,
    PretrainedReferit,
    PretrainedGuesswhat,
    FullyFoil,
}

impl RunSetting {
    pub const ALL: [RunSetting; 6] = [
        RunSetting::Random2,
        RunSetting::Random,
        RunSetting::PretrainedVqa,
        RunSetting::PretrainedReferit,
        RunSetting::PretrainedGuesswhat,
        RunSetting::FullyFoil,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RunSetting::Random2 => "random2",
            RunSetting::Random => "random",
            RunSetting::PretrainedVqa => "pretrained-vqa",
            RunSetting::PretrainedReferit => "pretrained-referit",
            RunSetting::PretrainedGuesswhat => "pretrained-guesswhat",
            RunSetting::FullyFoil => "fully-foil",
        }
    }

    pub fn parse(s: &str) -> Option<RunSetting> {
        RunSetting::ALL.iter().copied().find(|setting| setting.name() == s)
    }

    /// Encoder (and projection) parameters stay bitwise fixed during the
    /// probe for every setting but `FullyFoil`.
    pub fn frozen_encoder(&self) -> bool {
        !matches!(self, RunSetting::FullyFoil)
    }

    /// `Random2` is evaluation-only: the classifier never takes a step.
    pub fn trains_probe(&self) -> bool {
        !matches!(self, RunSetting::Random2)
    }

    /// Which retrieval pretraining the encoder comes from, if any.
    pub fn pretrain_task(&self) -> Option<Task> {
        match self {
            RunSetting::PretrainedVqa => Some(Task::Vqa),
            RunSetting::PretrainedReferit => Some(Task::Referit),
            RunSetting::PretrainedGuesswhat => Some(Task::Guesswhat),
            _ => None,
        }
    }
}

impl fmt::Display for RunSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a checkpoint holds: a retrieval pretraining run or a probe run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Pretrain(Task),
    Probe(RunSetting),
}

// ── Configuration ────────────────────────────────────────────────────────────

/// Knobs shared by pretraining and probing. The seed is mandatory: no
/// constructor defaults it from the clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without strict validation-loss improvement before stopping.
    pub patience: u32,
    pub max_epochs: u32,
    pub seed: u64,
    pub loss: LossConfig,
    /// Retrieval-head hidden width; `None` means the hub width.
    pub head_hidden: Option<usize>,
    /// Encoder bias terms (heads always carry theirs).
    pub use_bias: bool,
    /// Recompute the logged validation metric every this many epochs; the
    /// validation loss itself is computed every epoch regardless.
    pub eval_every: u32,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-4,
            patience: 10,
            max_epochs: 100,
            seed,
            loss: LossConfig::default(),
            head_hidden: None,
            use_bias: true,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |detail: String| Err(TrainError::BadConfig { detail });
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return fail("patience, max_epochs, eval_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.head_hidden == Some(0) {
            return fail("head_hidden must be at least 1".into());
        }
        self.loss.validate()?;
        Ok(())
    }

    fn root(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }
}

// ── Early stopping ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Strict-improvement early stopping with a patience counter and an epoch
/// cap. Losses equal to the best so far count toward patience.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    patience: u32,
    max_epochs: u32,
    best_loss: f64,
    best_epoch: u32,
    epochs_since_improvement: u32,
}

impl EarlyStopState {
    pub fn new(patience: u32, max_epochs: u32) -> Self {
        EarlyStopState {
            patience,
            max_epochs,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    /// Feeds the validation loss of `epoch` (1-based, consecutive). A NaN
    /// loss never counts as an improvement.
    pub fn update(&mut self, epoch: u32, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience || epoch >= self.max_epochs {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> u32 {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn epochs_since_improvement(&self) -> u32 {
        self.epochs_since_improvement
    }
}

// ── Banks and prepared datasets ──────────────────────────────────────────────

/// The two embedding stores every run reads from.
#[derive(Debug, Clone, Copy)]
pub struct Banks<'a> {
    pub visual: &'a EmbeddingBank,
    pub language: &'a EmbeddingBank,
}

impl<'a> Banks<'a> {
    /// Candidates live in language space for answer retrieval and in visual
    /// space for image retrieval.
    pub fn candidate_bank(&self, task: Task) -> &'a EmbeddingBank {
        match task {
            Task::Vqa => self.language,
            _ => self.visual,
        }
    }

    pub fn check_dims(&self, dims: &EncoderDims) -> Result<(), TrainError> {
        if self.visual.dim() != dims.visual {
            return Err(TrainError::BadConfig {
                detail: format!(
                    "visual bank dim {} does not match encoder dim {}",
                    self.visual.dim(),
                    dims.visual
                ),
            });
        }
        if self.language.dim() != dims.language {
            return Err(TrainError::BadConfig {
                detail: format!(
                    "language bank dim {} does not match encoder dim {}",
                    self.language.dim(),
                    dims.language
                ),
            });
        }
        Ok(())
    }
}

fn lookup(bank: &EmbeddingBank, id: &str) -> Result<Vector, TrainError> {
    bank.vector(id).map_err(|_| TrainError::MissingEmbedding { id: id.to_string() })
}

/// Retrieval records resolved to embeddings once, so epochs do not repeat
/// bank lookups.
#[derive(Debug, Clone)]
pub struct PreparedRetrieval {
    pub task: Task,
    pub visual: Vec<Vector>,
    pub language: Vec<Vector>,
    pub candidates: Vec<Vec<Vector>>,
    pub gt_index: Vec<usize>,
}

impl PreparedRetrieval {
    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }
}

pub fn prepare_retrieval(
    records: &[DatapointRecord],
    banks: &Banks<'_>,
) -> Result<PreparedRetrieval, TrainError> {
    let first = records.first().ok_or(TrainError::EmptyDataset)?;
    if !first.task.is_retrieval() {
        return Err(TrainError::TaskMismatch { expected: Task::Vqa, got: first.task });
    }
    let task = first.task;
    let candidate_bank = banks.candidate_bank(task);
    let mut prepared = PreparedRetrieval {
        task,
        visual: Vec::with_capacity(records.len()),
        language: Vec::with_capacity(records.len()),
        candidates: Vec::with_capacity(records.len()),
        gt_index: Vec::with_capacity(records.len()),
    };
    for record in records {
        if record.task != task {
            return Err(TrainError::TaskMismatch { expected: task, got: record.task });
        }
        record.validate()?;
        prepared.visual.push(lookup(banks.visual, &record.image_id)?);
        prepared.language.push(lookup(banks.language, &record.language_id)?);
        let mut row = Vec::with_capacity(record.candidate_ids.len());
        for id in &record.candidate_ids {
            row.push(lookup(candidate_bank, id)?);
        }
        prepared.candidates.push(row);
        prepared.gt_index.push(record.gt_index);
    }
    Ok(prepared)
}

/// Classification records resolved to embeddings and class indices.
#[derive(Debug, Clone)]
pub struct PreparedFoil {
    pub visual: Vec<Vector>,
    pub language: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl PreparedFoil {
    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }
}

pub fn prepare_foil(
    records: &[DatapointRecord],
    banks: &Banks<'_>,
) -> Result<PreparedFoil, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut prepared = PreparedFoil {
        visual: Vec::with_capacity(records.len()),
        language: Vec::with_capacity(records.len()),
        labels: Vec::with_capacity(records.len()),
    };
    for record in records {
        if record.task != Task::Foil {
            return Err(TrainError::TaskMismatch { expected: Task::Foil, got: record.task });
        }
        record.validate()?;
        let class = record.label.class_index().expect("validated classification record");
        prepared.visual.push(lookup(banks.visual, &record.image_id)?);
        prepared.language.push(lookup(banks.language, &record.language_id)?);
        prepared.labels.push(class);
    }
    Ok(prepared)
}

// ── Shared initialization ────────────────────────────────────────────────────

/// The encoder every setting of this seed starts from. `Random`, all
/// `Pretrained*` pretrainings, and `FullyFoil` call exactly this, which is
/// what makes their initial weights bitwise identical.
pub fn initial_encoder(dims: EncoderDims, cfg: &TrainConfig) -> Result<EncoderParams, TrainError> {
    Ok(init_encoder(dims, cfg.use_bias, &cfg.root())?)
}

/// The classifier every probe of this seed starts from (shared across
/// settings so probe comparisons differ only in the encoder).
pub fn initial_foil_head(dims: EncoderDims, cfg: &TrainConfig) -> FoilHead {
    FoilHead::init(dims.hidden, &cfg.root())
}

/// Resolves the encoder a probe starts from: a fresh seed-shared one, or the
/// best-validation encoder of a matching pretraining checkpoint.
pub fn setting_encoder(
    setting: RunSetting,
    pretrained: Option<&Checkpoint>,
    dims: EncoderDims,
    cfg: &TrainConfig,
) -> Result<EncoderParams, TrainError> {
    match setting.pretrain_task() {
        None => initial_encoder(dims, cfg),
        Some(task) => {
            let ckpt = pretrained.ok_or_else(|| TrainError::WrongCheckpoint {
                detail: format!("{setting} needs a pretraining checkpoint"),
            })?;
            match ckpt.kind {
                RunKind::Pretrain(t) if t == task => {}
                other => {
                    return Err(TrainError::WrongCheckpoint {
                        detail: format!("{setting} needs a {task} pretraining, got {other:?}"),
                    })
                }
            }
            if ckpt.encoder.dims() != dims {
                return Err(TrainError::WrongCheckpoint {
                    detail: format!(
                        "checkpoint dims {:?} do not match requested {:?}",
                        ckpt.encoder.dims(),
                        dims
                    ),
                });
            }
            Ok(ckpt.encoder.clone())
        }
    }
}

// ── Evaluation ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEval {
    pub p_at_1: f64,
    pub p_at_k: f64,
    pub k: usize,
    pub mean_rank: f64,
    pub mean_reciprocal_rank: f64,
    pub n: usize,
}

pub fn evaluate_retrieval_parts(
    encoder: &EncoderParams,
    head: &RetrievalHead,
    data: &PreparedRetrieval,
    k: usize,
) -> Result<RetrievalEval, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if k == 0 {
        return Err(TrainError::BadConfig { detail: "k must be at least 1".into() });
    }
    let (mut p1, mut pk, mut rank_sum, mut rr_sum) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..data.len() {
        let hub = encoder.encode_hub(&data.visual[i], &data.language[i])?;
        let (generated, _) = head.forward(&hub)?;
        let ranking = rank_candidates(&generated, &data.candidates[i], data.gt_index[i])?;
        p1 += ranking.precision_at(1);
        pk += ranking.precision_at(k);
        rank_sum += ranking.rank_of_gt as f64;
        rr_sum += ranking.reciprocal_rank;
    }
    let n = data.len() as f64;
    Ok(RetrievalEval {
        p_at_1: p1 / n,
        p_at_k: pk / n,
        k,
        mean_rank: rank_sum / n,
        mean_reciprocal_rank: rr_sum / n,
        n: data.len(),
    })
}

/// Mean margin loss without gradient work, used for validation.
pub fn retrieval_mean_loss(
    encoder: &EncoderParams,
    head: &RetrievalHead,
    data: &PreparedRetrieval,
    loss_cfg: &LossConfig,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for i in 0..data.len() {
        let hub = encoder.encode_hub(&data.visual[i], &data.language[i])?;
        let (generated, _) = head.forward(&hub)?;
        let (loss, _) = retrieval_loss(&generated, &data.candidates[i], data.gt_index[i], loss_cfg)?;
        sum += loss;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoilEval {
    pub overall: f64,
    /// Recall of the original class (NaN when the class is absent).
    pub original_accuracy: f64,
    /// Recall of the foiled class (NaN when the class is absent).
    pub foiled_accuracy: f64,
    pub n: usize,
}

/// One classifier decision: predicted class, true class, and class
/// probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoilPrediction {
    pub predicted: usize,
    pub label: usize,
    pub probabilities: [f64; 2],
}

impl FoilPrediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

pub fn foil_predictions(
    encoder: &EncoderParams,
    head: &FoilHead,
    data: &PreparedFoil,
) -> Result<Vec<FoilPrediction>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let hub = encoder.encode_hub(&data.visual[i], &data.language[i])?;
        let (predicted, probs) = head.predict(&hub)?;
        out.push(FoilPrediction {
            predicted,
            label: data.labels[i],
            probabilities: [probs[0], probs[1]],
        });
    }
    Ok(out)
}

pub fn evaluate_foil_parts(
    encoder: &EncoderParams,
    head: &FoilHead,
    data: &PreparedFoil,
) -> Result<FoilEval, TrainError> {
    let predictions = foil_predictions(encoder, head, data)?;
    let mut count = [0usize; 2];
    let mut correct = [0usize; 2];
    for p in &predictions {
        count[p.label] += 1;
        if p.correct() {
            correct[p.label] += 1;
        }
    }
    let recall = |c: usize| correct[c] as f64 / count[c] as f64;
    Ok(FoilEval {
        overall: (correct[0] + correct[1]) as f64 / predictions.len() as f64,
        original_accuracy: recall(0),
        foiled_accuracy: recall(1),
        n: predictions.len(),
    })
}

pub fn foil_mean_loss(
    encoder: &EncoderParams,
    head: &FoilHead,
    data: &PreparedFoil,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for i in 0..data.len() {
        let hub = encoder.encode_hub(&data.visual[i], &data.language[i])?;
        let (loss, _) = head.loss(&hub, data.labels[i])?;
        sum += loss;
    }
    Ok(sum / data.len() as f64)
}

/// Checkpoint-level wrappers; the checkpoint must be of the matching kind.
pub fn evaluate_retrieval(
    ckpt: &Checkpoint,
    records: &[DatapointRecord],
    banks: &Banks<'_>,
    k: usize,
) -> Result<RetrievalEval, TrainError> {
    let head = ckpt.head.retrieval().ok_or_else(|| TrainError::WrongCheckpoint {
        detail: "retrieval evaluation needs a pretraining checkpoint".into(),
    })?;
    let data = prepare_retrieval(records, banks)?;
    if let RunKind::Pretrain(task) = ckpt.kind {
        if task != data.task {
            return Err(TrainError::TaskMismatch { expected: task, got: data.task });
        }
    }
    evaluate_retrieval_parts(&ckpt.encoder, head, &data, k)
}

pub fn evaluate_foil(
    ckpt: &Checkpoint,
    records: &[DatapointRecord],
    banks: &Banks<'_>,
) -> Result<FoilEval, TrainError> {
    let head = ckpt.head.foil().ok_or_else(|| TrainError::WrongCheckpoint {
        detail: "classification evaluation needs a probe checkpoint".into(),
    })?;
    let data = prepare_foil(records, banks)?;
    evaluate_foil_parts(&ckpt.encoder, head, &data)
}

// ── Trainers ─────────────────────────────────────────────────────────────────

/// Epoch counter, losses, and the logged validation metric (P@1 for
/// retrieval, accuracy for classification).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

/// Adam state captured alongside the best-validation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub hyper: AdamHyper,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

struct TrainerSnapshot {
    flat: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

/// Minibatch Adam over the classifier, optionally including the encoder.
/// The flat parameter vector is `[encoder || head]` when training end to
/// end and `[head]` when the encoder is frozen.
pub struct FoilTrainer {
    encoder: EncoderParams,
    head: FoilHead,
    frozen: bool,
    flat: Vec<f64>,
    grad_flat: Vec<f64>,
    adam: AdamState,
    root: SeedStream,
    batch_size: usize,
}

impl FoilTrainer {
    pub fn new(
        encoder: EncoderParams,
        head: FoilHead,
        frozen: bool,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if head.hub_dim() != encoder.dims().hidden {
            return Err(TrainError::BadConfig {
                detail: format!(
                    "classifier input {} does not match hub width {}",
                    head.hub_dim(),
                    encoder.dims().hidden
                ),
            });
        }
        let mut flat = Vec::new();
        if !frozen {
            encoder.flatten_into(&mut flat);
        }
        flat.extend(head.to_flat());
        let adam = AdamState::new(flat.len(), AdamHyper::with_learning_rate(cfg.learning_rate));
        Ok(FoilTrainer {
            encoder,
            head,
            frozen,
            flat,
            grad_flat: Vec::new(),
            adam,
            root: cfg.root(),
            batch_size: cfg.batch_size,
        })
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn head(&self) -> &FoilHead {
        &self.head
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.steps()
    }

    /// One shuffled pass; returns the mean training loss. `epoch` is 1-based
    /// and seeds the shuffle substream.
    pub fn epoch(&mut self, data: &PreparedFoil, epoch: u32) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.root.substream_indexed("shuffle", epoch as u64).rng());
        let n_enc = if self.frozen { 0 } else { self.encoder.param_count() };
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.batch_size) {
            let mut enc_grads = self.encoder.grads_like();
            let mut head_grads = self.head.grads_like();
            for &i in batch {
                let cache = self.encoder.encode(&data.visual[i], &data.language[i])?;
                let (loss, grad_logits) = self.head.loss(cache.hub(), data.labels[i])?;
                let grad_hub = self.head.backward(&grad_logits, cache.hub(), &mut head_grads)?;
                if !self.frozen {
                    self.encoder.encode_backward(&grad_hub, &cache, &mut enc_grads)?;
                }
                loss_sum += loss;
            }
            let inv = 1.0 / batch.len() as f64;
            self.grad_flat.clear();
            if !self.frozen {
                enc_grads.scale(inv);
                enc_grads.flatten_into(&mut self.grad_flat);
            }
            head_grads.scale(inv);
            head_grads.flatten_into(&mut self.grad_flat);
            self.adam.step(&mut self.flat, &self.grad_flat)?;
            if !self.frozen {
                self.encoder.load_flat(&self.flat[..n_enc])?;
            }
            self.head.load_flat(&self.flat[n_enc..])?;
        }
        Ok(loss_sum / data.len() as f64)
    }

    pub fn validation_loss(&self, data: &PreparedFoil) -> Result<f64, TrainError> {
        foil_mean_loss(&self.encoder, &self.head, data)
    }

    pub fn evaluate(&self, data: &PreparedFoil) -> Result<FoilEval, TrainError> {
        evaluate_foil_parts(&self.encoder, &self.head, data)
    }

    fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            flat: self.flat.clone(),
            first_moment: self.adam.first_moment().to_vec(),
            second_moment: self.adam.second_moment().to_vec(),
            steps: self.adam.steps(),
        }
    }

    fn restore(&mut self, snap: &TrainerSnapshot) -> Result<(), TrainError> {
        self.flat = snap.flat.clone();
        let n_enc = if self.frozen { 0 } else { self.encoder.param_count() };
        if !self.frozen {
            self.encoder.load_flat(&self.flat[..n_enc])?;
        }
        self.head.load_flat(&self.flat[n_enc..])?;
        self.adam = AdamState::restore(
            *self.adam.hyper(),
            snap.first_moment.clone(),
            snap.second_moment.clone(),
            snap.steps,
        )?;
        Ok(())
    }

    fn into_checkpoint_parts(self) -> (EncoderParams, FoilHead, OptimizerSnapshot) {
        let optimizer = OptimizerSnapshot {
            hyper: *self.adam.hyper(),
            first_moment: self.adam.first_moment().to_vec(),
            second_moment: self.adam.second_moment().to_vec(),
            steps: self.adam.steps(),
        };
        (self.encoder, self.head, optimizer)
    }
}

/// Joint minibatch Adam over encoder plus retrieval head (pretraining always
/// trains both).
struct RetrievalTrainer {
    encoder: EncoderParams,
    head: RetrievalHead,
    loss_cfg: LossConfig,
    flat: Vec<f64>,
    grad_flat: Vec<f64>,
    adam: AdamState,
    root: SeedStream,
    batch_size: usize,
}

impl RetrievalTrainer {
    fn new(encoder: EncoderParams, head: RetrievalHead, cfg: &TrainConfig) -> Self {
        let mut flat = Vec::new();
        encoder.flatten_into(&mut flat);
        head.flatten_into(&mut flat);
        let adam = AdamState::new(flat.len(), AdamHyper::with_learning_rate(cfg.learning_rate));
        RetrievalTrainer {
            encoder,
            head,
            loss_cfg: cfg.loss,
            flat,
            grad_flat: Vec::new(),
            adam,
            root: cfg.root(),
            batch_size: cfg.batch_size,
        }
    }

    fn epoch(&mut self, data: &PreparedRetrieval, epoch: u32) -> Result<f64, TrainError> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.root.substream_indexed("shuffle", epoch as u64).rng());
        let n_enc = self.encoder.param_count();
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.batch_size) {
            let mut enc_grads = self.encoder.grads_like();
            let mut head_grads = self.head.grads_like();
            for &i in batch {
                let cache = self.encoder.encode(&data.visual[i], &data.language[i])?;
                let (generated, head_cache) = self.head.forward(cache.hub())?;
                let (loss, grad_generated) = retrieval_loss(
                    &generated,
                    &data.candidates[i],
                    data.gt_index[i],
                    &self.loss_cfg,
                )?;
                let grad_hub = self.head.backward(&grad_generated, &head_cache, &mut head_grads)?;
                self.encoder.encode_backward(&grad_hub, &cache, &mut enc_grads)?;
                loss_sum += loss;
            }
            let inv = 1.0 / batch.len() as f64;
            enc_grads.scale(inv);
            head_grads.scale(inv);
            self.grad_flat.clear();
            enc_grads.flatten_into(&mut self.grad_flat);
            head_grads.flatten_into(&mut self.grad_flat);
            self.adam.step(&mut self.flat, &self.grad_flat)?;
            self.encoder.load_flat(&self.flat[..n_enc])?;
            self.head.load_flat(&self.flat[n_enc..])?;
        }
        Ok(loss_sum / data.len() as f64)
    }

    fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            flat: self.flat.clone(),
            first_moment: self.adam.first_moment().to_vec(),
            second_moment: self.adam.second_moment().to_vec(),
            steps: self.adam.steps(),
        }
    }

    fn restore(&mut self, snap: &TrainerSnapshot) -> Result<(), TrainError> {
        self.flat = snap.flat.clone();
        let n_enc = self.encoder.param_count();
        self.encoder.load_flat(&self.flat[..n_enc])?;
        self.head.load_flat(&self.flat[n_enc..])?;
        self.adam = AdamState::restore(
            *self.adam.hyper(),
            snap.first_moment.clone(),
            snap.second_moment.clone(),
            snap.steps,
        )?;
        Ok(())
    }

    fn into_checkpoint_parts(self) -> (EncoderParams, RetrievalHead, OptimizerSnapshot) {
        let optimizer = OptimizerSnapshot {
            hyper: *self.adam.hyper(),
            first_moment: self.adam.first_moment().to_vec(),
            second_moment: self.adam.second_moment().to_vec(),
            steps: self.adam.steps(),
        };
        (self.encoder, self.head, optimizer)
    }
}

// ── Run protocols ────────────────────────────────────────────────────────────

fn ensure_finite(what: &str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NotFinite { what: what.to_string() })
    }
}

/// Trains encoder and retrieval head jointly on one task and returns the
/// best-validation checkpoint. Deterministic in `cfg.seed`.
pub fn pretrain_task(
    train: &[DatapointRecord],
    validation: &[DatapointRecord],
    banks: &Banks<'_>,
    dims: EncoderDims,
    cfg: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    banks.check_dims(&dims)?;
    let train_data = prepare_retrieval(train, banks)?;
    let val_data = prepare_retrieval(validation, banks)?;
    if val_data.task != train_data.task {
        return Err(TrainError::TaskMismatch { expected: train_data.task, got: val_data.task });
    }
    let task = train_data.task;
    let encoder = initial_encoder(dims, cfg)?;
    let head = RetrievalHead::init(
        dims.hidden,
        cfg.head_hidden.unwrap_or(dims.hidden),
        banks.candidate_bank(task).dim(),
        &cfg.root(),
    );
    let mut trainer = RetrievalTrainer::new(encoder, head, cfg);

    let mut early = EarlyStopState::new(cfg.patience, cfg.max_epochs);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<TrainerSnapshot> = None;
    let mut val_metric = f64::NAN;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = ensure_finite("train loss", trainer.epoch(&train_data, epoch)?)?;
        let val_loss = ensure_finite(
            "validation loss",
            retrieval_mean_loss(&trainer.encoder, &trainer.head, &val_data, &cfg.loss)?,
        )?;
        if epoch == 1 || epoch % cfg.eval_every == 0 {
            val_metric =
                evaluate_retrieval_parts(&trainer.encoder, &trainer.head, &val_data, 5)?.p_at_1;
        }
        log.push(EpochRecord { epoch, train_loss, val_loss, val_metric });
        let decision = early.update(epoch, val_loss);
        if early.best_epoch() == epoch {
            best = Some(trainer.snapshot());
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    let best = best.expect("first epoch always improves on infinity");
    trainer.restore(&best)?;
    let (encoder, head, optimizer) = trainer.into_checkpoint_parts();
    Ok(Checkpoint {
        kind: RunKind::Pretrain(task),
        encoder,
        head: CheckpointHead::Retrieval(head),
        optimizer: Some(optimizer),
        epochs_completed: log.len() as u32,
        best_epoch: early.best_epoch(),
        best_val_loss: early.best_loss(),
        log,
        seed: cfg.seed,
    })
}

/// Trains (or, for `Random2`, merely evaluates) the binary classifier under
/// one run setting. `pretrained` supplies the encoder for the `Pretrained*`
/// settings and is ignored otherwise.
pub fn train_foil_probe(
    setting: RunSetting,
    pretrained: Option<&Checkpoint>,
    train: &[DatapointRecord],
    validation: &[DatapointRecord],
    banks: &Banks<'_>,
    dims: EncoderDims,
    cfg: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    banks.check_dims(&dims)?;
    let train_data = prepare_foil(train, banks)?;
    let val_data = prepare_foil(validation, banks)?;
    let encoder = setting_encoder(setting, pretrained, dims, cfg)?;
    let head = initial_foil_head(dims, cfg);

    if !setting.trains_probe() {
        // Evaluation-only: zero optimizer steps, empty metric log.
        let val_loss = ensure_finite("validation loss", foil_mean_loss(&encoder, &head, &val_data)?)?;
        return Ok(Checkpoint {
            kind: RunKind::Probe(setting),
            encoder,
            head: CheckpointHead::Foil(head),
            optimizer: None,
            epochs_completed: 0,
            best_epoch: 0,
            best_val_loss: val_loss,
            log: Vec::new(),
            seed: cfg.seed,
        });
    }

    let mut trainer = FoilTrainer::new(encoder, head, setting.frozen_encoder(), cfg)?;
    let mut early = EarlyStopState::new(cfg.patience, cfg.max_epochs);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<TrainerSnapshot> = None;
    let mut val_metric = f64::NAN;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = ensure_finite("train loss", trainer.epoch(&train_data, epoch)?)?;
        let val_loss = ensure_finite("validation loss", trainer.validation_loss(&val_data)?)?;
        if epoch == 1 || epoch % cfg.eval_every == 0 {
            val_metric = trainer.evaluate(&val_data)?.overall;
        }
        log.push(EpochRecord { epoch, train_loss, val_loss, val_metric });
        let decision = early.update(epoch, val_loss);
        if early.best_epoch() == epoch {
            best = Some(trainer.snapshot());
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    let best = best.expect("first epoch always improves on infinity");
    trainer.restore(&best)?;
    let (encoder, head, optimizer) = trainer.into_checkpoint_parts();
    Ok(Checkpoint {
        kind: RunKind::Probe(setting),
        encoder,
        head: CheckpointHead::Foil(head),
        optimizer: Some(optimizer),
        epochs_completed: log.len() as u32,
        best_epoch: early.best_epoch(),
        best_val_loss: early.best_loss(),
        log,
        seed: cfg.seed,
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointHead {
    Retrieval(RetrievalHead),
    Foil(FoilHead),
}

impl CheckpointHead {
    pub fn retrieval(&self) -> Option<&RetrievalHead> {
        match self {
            CheckpointHead::Retrieval(h) => Some(h),
            CheckpointHead::Foil(_) => None,
        }
    }

    pub fn foil(&self) -> Option<&FoilHead> {
        match self {
            CheckpointHead::Foil(h) => Some(h),
            CheckpointHead::Retrieval(_) => None,
        }
    }
}

/// Best-validation model of one run, plus everything needed to audit or
/// resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: RunKind,
    pub encoder: EncoderParams,
    pub head: CheckpointHead,
    pub optimizer: Option<OptimizerSnapshot>,
    pub epochs_completed: u32,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
    pub seed: u64,
}

const CKPT_MAGIC: [u8; 4] = *b"HUBC";
const CKPT_VERSION: u32 = 1;

fn task_code(task: Task) -> u8 {
    match task {
        Task::Vqa => 0,
        Task::Referit => 1,
        Task::Guesswhat => 2,
        Task::Foil => 3,
    }
}

fn task_from_code(code: u8) -> Option<Task> {
    Some(match code {
        0 => Task::Vqa,
        1 => Task::Referit,
        2 => Task::Guesswhat,
        3 => Task::Foil,
        _ => return None,
    })
}

fn setting_code(setting: RunSetting) -> u8 {
    match setting {
        RunSetting::Random2 => 0,
        RunSetting::Random => 1,
        RunSetting::PretrainedVqa => 2,
        RunSetting::PretrainedReferit => 3,
        RunSetting::PretrainedGuesswhat => 4,
        RunSetting::FullyFoil => 5,
    }
}

fn setting_from_code(code: u8) -> Option<RunSetting> {
    RunSetting::ALL.get(code as usize).copied()
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn corrupt(&self, detail: &str) -> DataError {
        DataError::CorruptIndex { path: self.path.to_path_buf(), detail: detail.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        // bounds first, so a corrupt length field cannot trigger a huge read
        if n > self.bytes.len() - self.at {
            return Err(self.corrupt("unexpected end of file"));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let bytes = self.take(n.saturating_mul(8))?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(self) -> Result<(), DataError> {
        if self.at != self.bytes.len() {
            return Err(self.corrupt("trailing bytes after payload"));
        }
        Ok(())
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let (kind_byte, code) = match self.kind {
            RunKind::Pretrain(task) => (0u8, task_code(task)),
            RunKind::Probe(setting) => (1u8, setting_code(setting)),
        };
        out.push(kind_byte);
        out.push(code);
        out.push(self.encoder.use_bias() as u8);
        let dims = self.encoder.dims();
        let (head_kind, head_hidden, head_out) = match &self.head {
            CheckpointHead::Retrieval(h) => (0u8, h.hidden().out_dim(), h.out_dim()),
            CheckpointHead::Foil(_) => (1u8, 0, FoilHead::CLASSES),
        };
        out.push(head_kind);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for d in [dims.visual, dims.language, dims.projected, dims.hidden, head_hidden, head_out] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let encoder_flat = self.encoder.to_flat();
        out.extend_from_slice(&(encoder_flat.len() as u64).to_le_bytes());
        push_f64s(&mut out, &encoder_flat);
        let head_flat = match &self.head {
            CheckpointHead::Retrieval(h) => h.to_flat(),
            CheckpointHead::Foil(h) => h.to_flat(),
        };
        out.extend_from_slice(&(head_flat.len() as u64).to_le_bytes());
        push_f64s(&mut out, &head_flat);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.steps.to_le_bytes());
                push_f64s(
                    &mut out,
                    &[opt.hyper.learning_rate, opt.hyper.beta1, opt.hyper.beta2, opt.hyper.epsilon],
                );
                out.extend_from_slice(&(opt.first_moment.len() as u64).to_le_bytes());
                push_f64s(&mut out, &opt.first_moment);
                push_f64s(&mut out, &opt.second_moment);
            }
        }
        out.extend_from_slice(&self.epochs_completed.to_le_bytes());
        out.extend_from_slice(&self.best_epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        out.extend_from_slice(&(self.log.len() as u32).to_le_bytes());
        for r in &self.log {
            out.extend_from_slice(&r.epoch.to_le_bytes());
            push_f64s(&mut out, &[r.train_loss, r.val_loss, r.val_metric]);
        }
        crate::data::atomic_write(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        let mut r = ByteReader { path, bytes: &bytes, at: 0 };

        let magic = r.take(4)?;
        if magic != CKPT_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(DataError::BadMagic { path: path.to_path_buf(), found });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(DataError::UnsupportedVersion { path: path.to_path_buf(), found: version });
        }
        let kind_byte = r.u8()?;
        let code = r.u8()?;
        let use_bias = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.corrupt(&format!("bad bias flag {other}"))),
        };
        let head_kind = r.u8()?;
        let kind = match kind_byte {
            0 => RunKind::Pretrain(
                task_from_code(code).ok_or_else(|| r.corrupt(&format!("bad task code {code}")))?,
            ),
            1 => RunKind::Probe(
                setting_from_code(code)
                    .ok_or_else(|| r.corrupt(&format!("bad setting code {code}")))?,
            ),
            other => return Err(r.corrupt(&format!("bad run kind {other}"))),
        };
        let seed = r.u64()?;
        let dims = EncoderDims {
            visual: r.u32()? as usize,
            language: r.u32()? as usize,
            projected: r.u32()? as usize,
            hidden: r.u32()? as usize,
        };
        let head_hidden = r.u32()? as usize;
        let head_out = r.u32()? as usize;

        let n_enc = r.u64()? as usize;
        let encoder_flat = r.f64_vec(n_enc)?;
        let mut encoder = EncoderParams::from_parts(
            dims,
            use_bias,
            Affine::new(Matrix::zeros(dims.projected, dims.visual), Vector::zeros(dims.projected))
                .expect("shapes agree"),
            Affine::new(Matrix::zeros(dims.projected, dims.language), Vector::zeros(dims.projected))
                .expect("shapes agree"),
            Affine::new(Matrix::zeros(dims.hidden, 2 * dims.projected), Vector::zeros(dims.hidden))
                .expect("shapes agree"),
        )
        .map_err(|e| r.corrupt(&format!("bad encoder dims: {e}")))?;
        encoder
            .load_flat(&encoder_flat)
            .map_err(|e| r.corrupt(&format!("encoder payload: {e}")))?;

        let n_head = r.u64()? as usize;
        let head_flat = r.f64_vec(n_head)?;
        let head = match head_kind {
            0 => {
                let mut h = RetrievalHead::from_parts(
                    Affine::new(Matrix::zeros(head_hidden, dims.hidden), Vector::zeros(head_hidden))
                        .expect("shapes agree"),
                    Affine::new(Matrix::zeros(head_out, head_hidden), Vector::zeros(head_out))
                        .expect("shapes agree"),
                )
                .map_err(|e| r.corrupt(&format!("bad head dims: {e}")))?;
                h.load_flat(&head_flat).map_err(|e| r.corrupt(&format!("head payload: {e}")))?;
                CheckpointHead::Retrieval(h)
            }
            1 => {
                if head_out != FoilHead::CLASSES {
                    return Err(r.corrupt(&format!("classifier with {head_out} outputs")));
                }
                let mut h = FoilHead::from_parts(Affine::zeros(FoilHead::CLASSES, dims.hidden))
                    .expect("two logits");
                h.load_flat(&head_flat).map_err(|e| r.corrupt(&format!("head payload: {e}")))?;
                CheckpointHead::Foil(h)
            }
            other => return Err(r.corrupt(&format!("bad head kind {other}"))),
        };

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let steps = r.u64()?;
                let hyper = AdamHyper {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let len = r.u64()? as usize;
                let first_moment = r.f64_vec(len)?;
                let second_moment = r.f64_vec(len)?;
                Some(OptimizerSnapshot { hyper, first_moment, second_moment, steps })
            }
            other => return Err(r.corrupt(&format!("bad optimizer flag {other}"))),
        };

        let epochs_completed = r.u32()?;
        let best_epoch = r.u32()?;
        let best_val_loss = r.f64()?;
        let log_len = r.u32()? as usize;
        let mut log = Vec::new();
        for _ in 0..log_len {
            log.push(EpochRecord {
                epoch: r.u32()?,
                train_loss: r.f64()?,
                val_loss: r.f64()?,
                val_metric: r.f64()?,
            });
        }
        if log.len() as u32 != epochs_completed {
            return Err(r.corrupt(&format!(
                "metric log has {} rows for {epochs_completed} epochs",
                log.len()
            )));
        }
        if best_epoch > epochs_completed {
            return Err(r.corrupt(&format!(
                "best epoch {best_epoch} after {epochs_completed} completed epochs"
            )));
        }
        r.finish()?;
        Ok(Checkpoint {
            kind,
            encoder,
            head,
            optimizer,
            epochs_completed,
            best_epoch,
            best_val_loss,
            log,
            seed,
        })
    }
}

/// Per-epoch metric log as comma-separated rows.
pub fn write_metric_log(path: &Path, log: &[EpochRecord]) -> Result<(), DataError> {
    let mut out = String::from("epoch,train_loss,val_loss,val_metric\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_metric));
    }
    crate::data::atomic_write(path, out.as_bytes())
}
