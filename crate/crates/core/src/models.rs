//! The three sequence heads and whole-sequence inference.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{consecutive_plan, piggyback_plan, CarryStore, PiggybackPlan};
use crate::datamodel::DaySequence;
use crate::error::{Error, Result};
use crate::nnet::{
    forward_window, softmax, DropoutSpec, LayerStack, Mode, StackShape, WindowOutput,
};

/// Default LSTM hidden width.
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Baseline,
    Sliding,
    Piggyback,
}

impl Architecture {
    pub fn of(net: &LayerStack) -> Result<Self> {
        match (&net.embed, &net.lstm) {
            (None, None) => Ok(Architecture::Baseline),
            (None, Some(_)) => Ok(Architecture::Sliding),
            (Some(_), Some(_)) => Ok(Architecture::Piggyback),
            (Some(_), None) => Err(Error::Architecture(
                "embedding without an LSTM matches no known model".into(),
            )),
        }
    }

    pub fn shape(self, input: usize, hidden: usize, classes: usize) -> StackShape {
        match self {
            Architecture::Baseline => StackShape {
                input,
                embed: None,
                hidden: None,
                classes,
            },
            Architecture::Sliding => StackShape {
                input,
                embed: None,
                hidden: Some(hidden),
                classes,
            },
            Architecture::Piggyback => StackShape {
                input,
                embed: Some(hidden),
                hidden: Some(hidden),
                classes,
            },
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Baseline => "baseline",
            Architecture::Sliding => "sliding",
            Architecture::Piggyback => "piggyback",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Architecture::Baseline),
            "sliding" => Ok(Architecture::Sliding),
            "piggyback" => Ok(Architecture::Piggyback),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

fn require(net: &LayerStack, want: Architecture) -> Result<()> {
    net.check()?;
    let got = Architecture::of(net)?;
    if got != want {
        return Err(Error::Architecture(format!("expected a {want} stack, got {got}")));
    }
    Ok(())
}

/// Linear head over the frame features; each frame is classified alone.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBaselineModel {
    pub net: LayerStack,
}

impl FrameBaselineModel {
    pub fn new(net: LayerStack) -> Result<Self> {
        require(&net, Architecture::Baseline)?;
        Ok(FrameBaselineModel { net })
    }

    pub fn init<R: Rng + ?Sized>(input: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Self::new(LayerStack::init(
            Architecture::Baseline.shape(input, 0, classes),
            rng,
        )?)
    }
}

/// LSTM over the frame features followed by a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindowModel {
    pub net: LayerStack,
}

impl SlidingWindowModel {
    pub fn new(net: LayerStack) -> Result<Self> {
        require(&net, Architecture::Sliding)?;
        Ok(SlidingWindowModel { net })
    }

    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(LayerStack::init(
            Architecture::Sliding.shape(input, hidden, classes),
            rng,
        )?)
    }
}

/// Dense embedding to width `H`, an `H -> H` LSTM, and a dense head. Equal
/// embedding and LSTM widths let stored LSTM outputs stand in for embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PiggybackModel {
    pub net: LayerStack,
}

impl PiggybackModel {
    pub fn new(net: LayerStack) -> Result<Self> {
        require(&net, Architecture::Piggyback)?;
        let shape = net.shape();
        if shape.embed != shape.hidden {
            return Err(Error::Architecture(format!(
                "piggyback embedding width {:?} must equal LSTM width {:?}",
                shape.embed, shape.hidden
            )));
        }
        Ok(PiggybackModel { net })
    }

    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(LayerStack::init(
            Architecture::Piggyback.shape(input, hidden, classes),
            rng,
        )?)
    }
}

/// Which copy of an overlapped frame's prediction is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retention {
    #[default]
    Earlier,
    Later,
}

impl FromStr for Retention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "earlier" => Ok(Retention::Earlier),
            "later" => Ok(Retention::Later),
            other => Err(Error::Config(format!("unknown retention {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub index: usize,
    #[serde(rename = "true")]
    pub truth: usize,
    pub pred: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probs: Vec<f64>,
}

/// One prediction per real frame of a day sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTimeline {
    pub sequence_id: String,
    pub frames: Vec<FramePrediction>,
}

impl PredictionTimeline {
    pub fn without_probs(&self) -> Self {
        PredictionTimeline {
            sequence_id: self.sequence_id.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FramePrediction {
                    probs: Vec::new(),
                    ..f.clone()
                })
                .collect(),
        }
    }

    /// Mean `-ln p(true)` over frames; needs probabilities.
    pub fn mean_nll(&self) -> f64 {
        let n = self.frames.len().max(1) as f64;
        self.frames
            .iter()
            .map(|f| -f.probs[f.truth].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn frame_prediction(index: usize, truth: usize, logits: &[f64]) -> FramePrediction {
    let probs = softmax(logits);
    FramePrediction {
        index,
        truth,
        pred: argmax(&probs),
        probs,
    }
}

fn check_width(net: &LayerStack, seq: &DaySequence) -> Result<()> {
    if seq.dim() != net.input_dim() {
        return Err(Error::Shape(format!(
            "sequence {} has {} features, model expects {}",
            seq.sequence_id,
            seq.dim(),
            net.input_dim()
        )));
    }
    Ok(())
}

pub fn predict_baseline(model: &FrameBaselineModel, seq: &DaySequence) -> Result<PredictionTimeline> {
    check_width(&model.net, seq)?;
    let frames = (0..seq.len())
        .map(|t| {
            let logits = model.net.head.forward(seq.features.row(t))?;
            Ok(frame_prediction(t, seq.labels[t], &logits))
        })
        .collect::<Result<_>>()?;
    Ok(PredictionTimeline {
        sequence_id: seq.sequence_id.clone(),
        frames,
    })
}

/// Runs every batch of `plan` in order (carrying outputs when the plan
/// overlaps) and returns the raw per-batch outputs.
pub fn run_plan(net: &LayerStack, seq: &DaySequence, plan: &PiggybackPlan) -> Result<Vec<WindowOutput>> {
    check_width(net, seq)?;
    if plan.len != seq.len() {
        return Err(Error::Sequencing(format!(
            "plan for {} frames applied to a sequence of {}",
            plan.len,
            seq.len()
        )));
    }
    let mut store = CarryStore::new(plan.overlap);
    let mut outputs = Vec::with_capacity(plan.num_batches());
    for b in 0..plan.num_batches() {
        let rows: Vec<&[f64]> = plan
            .frame_indices(b)
            .into_iter()
            .map(|i| seq.features.row(i))
            .collect();
        let out = if plan.overlap > 0 {
            let mask = plan.carry_mask(b);
            let out = forward_window(net, &rows, Some((&mask, &store)), &DropoutSpec::none(), Mode::Eval)?;
            store.store(&out.hidden)?;
            out
        } else {
            forward_window(net, &rows, None, &DropoutSpec::none(), Mode::Eval)?
        };
        outputs.push(out);
    }
    Ok(outputs)
}

fn timeline_from_plan(
    net: &LayerStack,
    seq: &DaySequence,
    plan: &PiggybackPlan,
    retention: Retention,
) -> Result<PredictionTimeline> {
    let outputs = run_plan(net, seq, plan)?;
    let mut slots: Vec<Option<FramePrediction>> = vec![None; seq.len()];
    for (b, out) in outputs.iter().enumerate() {
        let real = plan.loss_mask(b);
        for (p, frame) in plan.frame_indices(b).into_iter().enumerate() {
            if !real[p] {
                continue;
            }
            if retention == Retention::Later || slots[frame].is_none() {
                slots[frame] = Some(frame_prediction(frame, seq.labels[frame], &out.logits[p]));
            }
        }
    }
    let frames = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Sequencing(format!("frame {i} never predicted"))))
        .collect::<Result<_>>()?;
    Ok(PredictionTimeline {
        sequence_id: seq.sequence_id.clone(),
        frames,
    })
}

/// Non-overlapping windows of `timestep` frames, each starting from a zero
/// LSTM state; every frame gets the output of the one window containing it.
pub fn predict_sliding_sequence(
    model: &SlidingWindowModel,
    seq: &DaySequence,
    timestep: usize,
) -> Result<PredictionTimeline> {
    let plan = consecutive_plan(seq.len(), timestep)?;
    timeline_from_plan(&model.net, seq, &plan, Retention::Earlier)
}

pub fn predict_piggyback_sequence(
    model: &PiggybackModel,
    seq: &DaySequence,
    n: usize,
    m: usize,
    retention: Retention,
) -> Result<PredictionTimeline> {
    let plan = piggyback_plan(seq.len(), n, m)?;
    timeline_from_plan(&model.net, seq, &plan, retention)
}

/// Piggyback stack run on consecutive batches with no carry (first training phase).
pub fn predict_consecutive(
    net: &LayerStack,
    seq: &DaySequence,
    n: usize,
) -> Result<PredictionTimeline> {
    let plan = consecutive_plan(seq.len(), n)?;
    timeline_from_plan(net, seq, &plan, Retention::Earlier)
}

/// Inference settings shared by the CLI and validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub timestep: usize,
    pub overlap: usize,
    pub retention: Retention,
}

/// Dispatches on the stack's architecture.
pub fn predict_sequence(
    net: &LayerStack,
    seq: &DaySequence,
    cfg: &InferenceConfig,
) -> Result<PredictionTimeline> {
    match Architecture::of(net)? {
        Architecture::Baseline => predict_baseline(&FrameBaselineModel::new(net.clone())?, seq),
        Architecture::Sliding => {
            let plan = consecutive_plan(seq.len(), cfg.timestep)?;
            timeline_from_plan(net, seq, &plan, Retention::Earlier)
        }
        Architecture::Piggyback => {
            if cfg.overlap == 0 {
                predict_consecutive(net, seq, cfg.timestep)
            } else {
                let plan = piggyback_plan(seq.len(), cfg.timestep, cfg.overlap)?;
                timeline_from_plan(net, seq, &plan, cfg.retention)
            }
        }
    }
}
