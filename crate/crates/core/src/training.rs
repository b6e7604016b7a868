//! Epoch loops for the three heads.
//!
//! Every window or batch is one SGD step on the mean cross-entropy of its real
//! frames. Training sequences are reshuffled each epoch with a seeded
//! permutation; windows inside a sequence run in ascending order. After each
//! epoch the validation sequences are predicted with the inference tiling and
//! the epoch with the lowest validation loss is kept.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{consecutive_plan, piggyback_plan, sliding_starts, CarryMask, CarryStore};
use crate::datamodel::DaySequence;
use crate::error::{Error, Result};
use crate::models::{
    predict_sequence, Architecture, FrameBaselineModel, InferenceConfig, PiggybackModel,
    Retention, SlidingWindowModel,
};
use crate::nnet::{
    backprop_window, write_checkpoint, DropoutSpec, LayerStack, Mode, OptimizerState, SgdParams,
};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Window length (sliding, baseline) or batch size `n` (piggyback).
    pub timestep: usize,
    /// Piggyback overlap `m`; zero for the other architectures.
    pub overlap: usize,
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Piggyback only: run phase 1, phase 2, or both when `None`.
    pub phase: Option<u8>,
    pub retention: Retention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::Sliding,
            timestep: 5,
            overlap: 0,
            hidden: crate::models::DEFAULT_HIDDEN,
            lr: 2.5e-5,
            momentum: 0.9,
            weight_decay: 5e-6,
            epochs: 5,
            patience: 2,
            dropout: 0.5,
            seed: 0,
            phase: None,
            retention: Retention::Earlier,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.timestep == 0 {
            return Err(Error::Config("timestep must be at least 1".into()));
        }
        if self.architecture != Architecture::Baseline && self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        DropoutSpec::new(self.dropout, 0)?;
        match self.architecture {
            Architecture::Piggyback => {
                if self.overlap == 0 || self.overlap >= self.timestep {
                    return Err(Error::Config(format!(
                        "piggyback needs 0 < overlap < timestep, got timestep {} and overlap {}",
                        self.timestep, self.overlap
                    )));
                }
                if let Some(p) = self.phase {
                    if p != 1 && p != 2 {
                        return Err(Error::Config(format!("phase must be 1 or 2, got {p}")));
                    }
                }
            }
            _ => {
                if self.overlap != 0 {
                    return Err(Error::Config(format!(
                        "overlap only applies to piggyback, not {}",
                        self.architecture
                    )));
                }
                if self.phase.is_some() {
                    return Err(Error::Config(format!(
                        "phases only apply to piggyback, not {}",
                        self.architecture
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    NumericFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Option<u8>,
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs`; `None` if no epoch completed.
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: LayerStack,
    pub last: LayerStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// Stops once the best validation loss is `patience` epochs old.
pub fn early_stop_update(history: &[f64], patience: usize) -> EarlyStop {
    let Some(best) = best_index(history) else {
        return EarlyStop::Continue;
    };
    if history.len() - 1 - best >= patience {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if v < history[b] - IMPROVEMENT_EPS => best = Some(i),
            _ => {}
        }
    }
    best
}

/// How a training sequence is cut into SGD steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    Sliding { timestep: usize },
    Consecutive { n: usize },
    Overlap { n: usize, m: usize },
}

struct Batch {
    frames: Vec<usize>,
    loss_mask: Vec<bool>,
    carry: Option<CarryMask>,
}

impl Schedule {
    fn batches(self, len: usize) -> Result<Vec<Batch>> {
        Ok(match self {
            Schedule::Sliding { timestep } => sliding_starts(len, timestep)
                .into_iter()
                .map(|w| Batch {
                    frames: w.frame_indices(),
                    loss_mask: w.loss_mask(),
                    carry: None,
                })
                .collect(),
            Schedule::Consecutive { n } => {
                let plan = consecutive_plan(len, n)?;
                (0..plan.num_batches())
                    .map(|b| Batch {
                        frames: plan.frame_indices(b),
                        loss_mask: plan.loss_mask(b),
                        carry: None,
                    })
                    .collect()
            }
            Schedule::Overlap { n, m } => {
                let plan = piggyback_plan(len, n, m)?;
                (0..plan.num_batches())
                    .map(|b| Batch {
                        frames: plan.frame_indices(b),
                        loss_mask: plan.loss_mask(b),
                        carry: Some(plan.carry_mask(b)),
                    })
                    .collect()
            }
        })
    }

    fn overlap(self) -> usize {
        match self {
            Schedule::Overlap { m, .. } => m,
            _ => 0,
        }
    }
}

/// Number of SGD steps one epoch takes over `sequences`.
pub fn steps_per_epoch(cfg: &TrainConfig, sequences: &[DaySequence], phase: Option<u8>) -> Result<usize> {
    let schedule = schedule_for(cfg, phase);
    sequences
        .iter()
        .map(|s| schedule.batches(s.len()).map(|b| b.len()))
        .sum()
}

fn schedule_for(cfg: &TrainConfig, phase: Option<u8>) -> Schedule {
    match (cfg.architecture, phase) {
        (Architecture::Sliding, _) => Schedule::Sliding {
            timestep: cfg.timestep,
        },
        (Architecture::Baseline, _) | (Architecture::Piggyback, Some(1)) => Schedule::Consecutive { n: cfg.timestep },
        (Architecture::Piggyback, _) => Schedule::Overlap {
            n: cfg.timestep,
            m: cfg.overlap,
        },
    }
}

/// Mean per-frame NLL and accuracy over the validation sequences, summed in
/// sequence order.
pub fn evaluate(net: &LayerStack, sequences: &[DaySequence], infer: &InferenceConfig) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut frames = 0usize;
    for seq in sequences {
        let tl = predict_sequence(net, seq, infer)?;
        for f in &tl.frames {
            nll -= f.probs[f.truth].max(f64::MIN_POSITIVE).ln();
            correct += usize::from(f.pred == f.truth);
        }
        frames += tl.frames.len();
    }
    if frames == 0 {
        return Err(Error::EmptyInput("no validation frames".into()));
    }
    Ok((nll / frames as f64, correct as f64 / frames as f64))
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Numeric(_))
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    mut net: LayerStack,
    train: &[DaySequence],
    val: &[DaySequence],
    cfg: &TrainConfig,
    phase: Option<u8>,
    infer: InferenceConfig,
    trainable: fn(&str) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("no training sequences".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("no validation sequences".into()));
    }
    for s in train.iter().chain(val) {
        if s.dim() != net.input_dim() {
            return Err(Error::Shape(format!(
                "sequence {} has {} features, model expects {}",
                s.sequence_id,
                s.dim(),
                net.input_dim()
            )));
        }
        s.validate(net.classes())?;
    }
    let schedule = schedule_for(cfg, phase);
    let mut opt = OptimizerState::new(cfg.sgd(), &net)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best = net.clone();
    let mut stop_reason = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for &si in &order {
            let seq = &train[si];
            let mut store = CarryStore::new(schedule.overlap());
            for batch in schedule.batches(seq.len())? {
                let rows: Vec<&[f64]> = batch.frames.iter().map(|&i| seq.features.row(i)).collect();
                let labels: Vec<usize> = batch.frames.iter().map(|&i| seq.labels[i]).collect();
                let dropout = DropoutSpec::new(cfg.dropout, rng.next_u64())?;
                let carry = batch.carry.as_ref().map(|mask| (mask, &store));
                let step = backprop_window(&net, &rows, &labels, &batch.loss_mask, carry, &dropout, Mode::Train);
                let step = match step {
                    Ok(s) => s,
                    Err(e) if is_numeric(&e) => {
                        stop_reason = StopReason::NumericFailure;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if batch.carry.is_some() {
                    store.store(&step.output.hidden)?;
                }
                opt.step(&mut net, &step.grads, trainable)?;
                loss_sum += step.loss;
                steps += 1;
            }
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        if !train_loss.is_finite() || !net.is_finite() {
            stop_reason = StopReason::NumericFailure;
            break;
        }
        let (val_loss, val_accuracy) = match evaluate(&net, val, &infer) {
            Ok(v) => v,
            Err(e) if is_numeric(&e) => {
                stop_reason = StopReason::NumericFailure;
                break;
            }
            Err(e) => return Err(e),
        };
        epochs.push(EpochStats {
            epoch,
            steps,
            train_loss,
            val_loss,
            val_accuracy,
        });
        history.push(val_loss);
        if best_index(&history) == Some(history.len() - 1) {
            best = net.clone();
        }
        if early_stop_update(&history, cfg.patience) == EarlyStop::Stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainOutcome {
        report: TrainReport {
            phase,
            best_epoch: best_index(&history),
            epochs,
            stop_reason,
        },
        best,
        last: net,
    })
}

fn training_rng(cfg: &TrainConfig, phase: Option<u8>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.map_or(0, u64::from) + 1);
    rng
}

fn all_trainable(_: &str) -> bool {
    true
}

fn not_embedding(name: &str) -> bool {
    !name.starts_with("embed.")
}

fn infer_config(cfg: &TrainConfig, overlap: usize) -> InferenceConfig {
    InferenceConfig {
        timestep: cfg.timestep,
        overlap,
        retention: cfg.retention,
    }
}

fn check_arch(cfg: &TrainConfig, want: Architecture) -> Result<()> {
    cfg.validate()?;
    if cfg.architecture != want {
        return Err(Error::Config(format!(
            "config is for {}, not {want}",
            cfg.architecture
        )));
    }
    Ok(())
}

pub fn train_baseline(
    model: FrameBaselineModel,
    train: &[DaySequence],
    val: &[DaySequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_arch(cfg, Architecture::Baseline)?;
    let mut rng = training_rng(cfg, None);
    run_phase(model.net, train, val, cfg, None, infer_config(cfg, 0), all_trainable, &mut rng)
}

/// One SGD step per stride-1 window; validation uses non-overlapping tiling.
pub fn train_sliding(
    model: SlidingWindowModel,
    train: &[DaySequence],
    val: &[DaySequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_arch(cfg, Architecture::Sliding)?;
    let mut rng = training_rng(cfg, None);
    run_phase(model.net, train, val, cfg, None, infer_config(cfg, 0), all_trainable, &mut rng)
}

/// Phase 1: consecutive batches of `n` frames, no overlap, no carry, all
/// layers trained.
pub fn train_piggyback_phase1(
    model: PiggybackModel,
    train: &[DaySequence],
    val: &[DaySequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_arch(cfg, Architecture::Piggyback)?;
    let mut rng = training_rng(cfg, Some(1));
    run_phase(model.net, train, val, cfg, Some(1), infer_config(cfg, 0), all_trainable, &mut rng)
}

/// Phase 2: overlapping batches with carried LSTM outputs; the embedding is
/// frozen. Requires the phase-1 model.
pub fn train_piggyback_phase2(
    phase1: Option<PiggybackModel>,
    train: &[DaySequence],
    val: &[DaySequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_arch(cfg, Architecture::Piggyback)?;
    let model = phase1.ok_or_else(|| {
        Error::Sequencing("piggyback phase 2 needs a phase-1 checkpoint".into())
    })?;
    let mut rng = training_rng(cfg, Some(2));
    run_phase(
        model.net,
        train,
        val,
        cfg,
        Some(2),
        infer_config(cfg, cfg.overlap),
        not_embedding,
        &mut rng,
    )
}

/// Both phases; phase 2 starts from the best phase-1 epoch.
pub fn train_piggyback(
    model: PiggybackModel,
    train: &[DaySequence],
    val: &[DaySequence],
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let first = train_piggyback_phase1(model, train, val, cfg)?;
    if first.report.stop_reason == StopReason::NumericFailure {
        return Ok((first.clone(), first));
    }
    let start = PiggybackModel::new(first.best.clone())?;
    let second = train_piggyback_phase2(Some(start), train, val, cfg)?;
    Ok((first, second))
}

/// Everything one `train` invocation produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub reports: Vec<TrainReport>,
    pub best: LayerStack,
    pub last: LayerStack,
}

impl RunOutcome {
    pub fn numeric_failure(&self) -> bool {
        self.reports
            .iter()
            .any(|r| r.stop_reason == StopReason::NumericFailure)
    }
}

/// Builds (or takes) the model for `cfg` and trains it.
pub fn run_training(
    cfg: &TrainConfig,
    train: &[DaySequence],
    val: &[DaySequence],
    num_classes: usize,
    init: Option<LayerStack>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let input = train
        .first()
        .map(DaySequence::dim)
        .ok_or_else(|| Error::EmptyInput("no training sequences".into()))?;
    let shape = cfg.architecture.shape(input, cfg.hidden, num_classes);
    let net = match init {
        Some(net) => {
            if net.shape() != shape {
                return Err(Error::Architecture(format!(
                    "initial checkpoint shape {:?} does not match {shape:?}",
                    net.shape()
                )));
            }
            Some(net)
        }
        None => None,
    };
    let fresh = || -> Result<LayerStack> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        LayerStack::init(shape, &mut rng)
    };
    let (reports, best, last) = match cfg.architecture {
        Architecture::Baseline => {
            let model = FrameBaselineModel::new(net.map_or_else(fresh, Ok)?)?;
            let o = train_baseline(model, train, val, cfg)?;
            (vec![o.report], o.best, o.last)
        }
        Architecture::Sliding => {
            let model = SlidingWindowModel::new(net.map_or_else(fresh, Ok)?)?;
            let o = train_sliding(model, train, val, cfg)?;
            (vec![o.report], o.best, o.last)
        }
        Architecture::Piggyback => match cfg.phase {
            Some(1) => {
                let model = PiggybackModel::new(net.map_or_else(fresh, Ok)?)?;
                let o = train_piggyback_phase1(model, train, val, cfg)?;
                (vec![o.report], o.best, o.last)
            }
            Some(2) => {
                let model = net.map(PiggybackModel::new).transpose()?;
                let o = train_piggyback_phase2(model, train, val, cfg)?;
                (vec![o.report], o.best, o.last)
            }
            _ => {
                let model = PiggybackModel::new(net.map_or_else(fresh, Ok)?)?;
                let (a, b) = train_piggyback(model, train, val, cfg)?;
                if a.report.stop_reason == StopReason::NumericFailure {
                    (vec![a.report], a.best, a.last)
                } else {
                    (vec![a.report, b.report], b.best, b.last)
                }
            }
        },
    };
    Ok(RunOutcome {
        config: cfg.clone(),
        reports,
        best,
        last,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    architecture: Architecture,
    phases: &'a [TrainReport],
}

/// `config.json`, `report.json`, `best.egomdl`, `last.egomdl` under `dir`.
pub fn write_run_dir(dir: impl AsRef<Path>, outcome: &RunOutcome) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = dir.join("config.json");
    fs::write(&config, serde_json::to_string_pretty(&outcome.config)?)
        .map_err(|e| Error::io(&config, e))?;
    let report = dir.join("report.json");
    let body = ReportFile {
        architecture: outcome.config.architecture,
        phases: &outcome.reports,
    };
    fs::write(&report, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&report, e))?;
    write_checkpoint(&outcome.best, dir.join("best.egomdl"))?;
    write_checkpoint(&outcome.last, dir.join("last.egomdl"))
}
