//! Command-line front end: `synth`, `split`, `train`, `predict`, `eval`,
//! `gradcheck`. Every subcommand writes its outputs under `--out-dir`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{CarryMask, CarryStore};
use crate::datamodel::{
    generate_synthetic, load_dataset, write_dataset, DaySequence, Dataset, LabelSet, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion_from_timelines, macro_report, write_reports};
use crate::models::{predict_sequence, Architecture, InferenceConfig, PredictionTimeline, Retention};
use crate::nnet::{grad_check, read_checkpoint, DropoutSpec, GradCheckReport, LayerStack};
use crate::splitter::{select_split, SplitConfig, SplitResult, ValReference};
use crate::training::{run_training, write_run_dir, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "egolstm", version, about = "Recurrent activity recognition over day-long photo-stream feature sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a context-dependent ambiguous class pair.
    Synth(SynthArgs),
    /// Pack day sequences into bins and choose test/validation/training bins.
    Split(SplitArgs),
    /// Train a baseline, sliding-window or piggyback model.
    Train(TrainArgs),
    /// Predict per-frame labels with a trained checkpoint.
    Predict(PredictArgs),
    /// Compute accuracy, macro metrics and confusion matrices from timelines.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small random model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Baseline,
    Sliding,
    Piggyback,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Baseline => Architecture::Baseline,
            ArchArg::Sliding => Architecture::Sliding,
            ArchArg::Piggyback => Architecture::Piggyback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RetentionArg {
    Earlier,
    Later,
}

impl From<RetentionArg> for Retention {
    fn from(r: RetentionArg) -> Self {
        match r {
            RetentionArg::Earlier => Retention::Earlier,
            RetentionArg::Later => Retention::Later,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReferenceArg {
    Whole,
    Remaining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset manifest (JSON list of sequence_id, user_id, path).
    #[arg(long)]
    manifest: PathBuf,
    /// Label file, one category per line [default: labels.txt next to the manifest].
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("labels.txt")
        })
    }

    fn load(&self) -> Result<Dataset> {
        let labels = LabelSet::read(self.labels_path())?;
        load_dataset(&self.manifest, labels)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for labels.txt, manifest.json and the .egoseq files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of activity categories.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Feature dimension per frame.
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Number of day sequences.
    #[arg(long, default_value_t = 40)]
    sequences: usize,
    /// Frames per day sequence.
    #[arg(long, default_value_t = 300)]
    frames: usize,
    /// Probability of staying in the current activity at each frame.
    #[arg(long, default_value_t = 0.8)]
    self_transition: f64,
    /// Standard deviation of the Gaussian feature noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Length of the class mean vectors.
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
    /// The two classes sharing one emission mean, as "a,b".
    #[arg(long, default_value = "4,5", value_parser = parse_pair)]
    ambiguous_pair: (usize, usize),
    /// Predecessors that disambiguate the pair, as "a,b".
    #[arg(long, default_value = "2,3", value_parser = parse_pair)]
    context_map: (usize, usize),
    /// Give every class its own mean (no ambiguous pair).
    #[arg(long)]
    no_ambiguity: bool,
    /// Generator seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"a,b\", got {s:?}"))?;
    let a = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for split.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of bins to pack the day sequences into.
    #[arg(long)]
    bins: usize,
    /// Bins assigned to the test split.
    #[arg(long)]
    test_bins: usize,
    /// Bins assigned to the validation split.
    #[arg(long)]
    val_bins: usize,
    /// Bin capacity in frames [default: ceil(1.1 * total / bins)].
    #[arg(long)]
    capacity: Option<usize>,
    /// Distribution the validation choice is compared against.
    #[arg(long, value_enum, default_value_t = ReferenceArg::Whole)]
    val_reference: ReferenceArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// split.json produced by `split`.
    #[arg(long)]
    split: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Model architecture.
    #[arg(long, value_enum)]
    arch: ArchArg,
    /// Window length (sliding, baseline batches) or batch size n (piggyback).
    #[arg(long, default_value_t = 5)]
    timestep: usize,
    /// Piggyback overlap m (0 < m < timestep); piggyback only.
    #[arg(long)]
    overlap: Option<usize>,
    /// LSTM hidden width.
    #[arg(long, default_value_t = crate::models::DEFAULT_HIDDEN)]
    hidden: usize,
    /// SGD learning rate.
    #[arg(long, default_value_t = 2.5e-5)]
    lr: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// L2 weight decay.
    #[arg(long, default_value_t = 5e-6)]
    weight_decay: f64,
    /// Maximum number of epochs.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 2)]
    patience: usize,
    /// Dropout rate on the LSTM output.
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Seed for initialisation, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Piggyback training phase to run (1 or 2); both when omitted.
    #[arg(long)]
    phase: Option<u8>,
    /// Overlapped-frame retention used for piggyback validation.
    #[arg(long, value_enum, default_value_t = RetentionArg::Earlier)]
    retention: RetentionArg,
    /// Checkpoint to start from (required for --phase 2).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained .egomdl checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for timelines.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// split.json selecting the sequences to predict.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Which split to predict (needs --split unless "all").
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    /// Inference window / batch size [default: from config.json next to the model].
    #[arg(long)]
    timestep: Option<usize>,
    /// Piggyback overlap [default: from config.json next to the model].
    #[arg(long)]
    overlap: Option<usize>,
    /// Which prediction of an overlapped frame is kept.
    #[arg(long, value_enum, default_value_t = RetentionArg::Earlier)]
    retention: RetentionArg,
    /// Omit per-frame probability vectors from the output.
    #[arg(long)]
    no_probs: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// timelines.json produced by `predict`.
    #[arg(long)]
    timelines: PathBuf,
    /// Label file naming the categories.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory for report.json and the confusion CSVs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Output directory for gradcheck.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Architecture to check; all three when omitted.
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Seed for the random model, inputs and dropout mask.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn synth(a: SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        feature_dim: a.feature_dim,
        ambiguous_pair: (!a.no_ambiguity).then_some(a.ambiguous_pair),
        context_map: a.context_map,
        self_transition_prob: a.self_transition,
        noise_sigma: a.noise,
        mean_scale: a.mean_scale,
        num_sequences: a.sequences,
        frames_per_sequence: a.frames,
        seed: a.seed,
    };
    let dataset = generate_synthetic(&cfg)?;
    write_dataset(&dataset, &a.out_dir)?;
    write_json(&a.out_dir.join("config.json"), &cfg)?;
    println!(
        "wrote {} sequences to {}",
        dataset.sequences.len(),
        a.out_dir.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct SplitFile<'a> {
    requested_bins: usize,
    test_bins: usize,
    val_bins: usize,
    capacity: Option<usize>,
    val_reference: &'static str,
    #[serde(flatten)]
    result: &'a SplitResult,
}

fn split(a: SplitArgs) -> Result<i32> {
    let dataset = a.data.load()?;
    let cfg = SplitConfig {
        bins: a.bins,
        test_bins: a.test_bins,
        val_bins: a.val_bins,
        capacity: a.capacity,
        reference: match a.val_reference {
            ReferenceArg::Whole => ValReference::Whole,
            ReferenceArg::Remaining => ValReference::Remaining,
        },
    };
    let result = select_split(&dataset, &cfg)?;
    let file = SplitFile {
        requested_bins: a.bins,
        test_bins: a.test_bins,
        val_bins: a.val_bins,
        capacity: a.capacity,
        val_reference: match a.val_reference {
            ReferenceArg::Whole => "whole",
            ReferenceArg::Remaining => "remaining",
        },
        result: &result,
    };
    write_json(&a.out_dir.join("split.json"), &file)?;
    println!(
        "test {} / val {} / train {} sequences",
        result.test.len(),
        result.val.len(),
        result.train.len()
    );
    Ok(0)
}

fn load_split(path: &Path) -> Result<SplitResult> {
    read_json(path)
}

fn train(a: TrainArgs) -> Result<i32> {
    let architecture: Architecture = a.arch.into();
    if architecture != Architecture::Piggyback {
        if a.overlap.is_some() {
            return Err(Error::Config("--overlap applies only to --arch piggyback".into()));
        }
        if a.phase.is_some() {
            return Err(Error::Config("--phase applies only to --arch piggyback".into()));
        }
    }
    let cfg = TrainConfig {
        architecture,
        timestep: a.timestep,
        overlap: match architecture {
            Architecture::Piggyback => a.overlap.ok_or_else(|| {
                Error::Config("--arch piggyback needs --overlap".into())
            })?,
            _ => 0,
        },
        hidden: a.hidden,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        patience: a.patience,
        dropout: a.dropout,
        seed: a.seed,
        phase: a.phase,
        retention: a.retention.into(),
    };
    cfg.validate()?;
    let dataset = a.data.load()?;
    let split = load_split(&a.split)?;
    let train_seqs = dataset.select(&split.train)?;
    let val_seqs = dataset.select(&split.val)?;
    let init = a.init.as_ref().map(|p| read_checkpoint(p, None)).transpose()?;
    let outcome = run_training(&cfg, &train_seqs, &val_seqs, dataset.num_classes(), init)?;
    write_run_dir(&a.out_dir, &outcome)?;
    for r in &outcome.reports {
        for e in &r.epochs {
            println!(
                "{}epoch {}: train_loss {:.6} val_loss {:.6} val_acc {:.4}",
                r.phase.map(|p| format!("phase {p} ")).unwrap_or_default(),
                e.epoch + 1,
                e.train_loss,
                e.val_loss,
                e.val_accuracy
            );
        }
    }
    if outcome.numeric_failure() {
        eprintln!("error: training stopped on a non-finite loss");
        return Ok(3);
    }
    Ok(0)
}

fn predict(a: PredictArgs) -> Result<i32> {
    let net = read_checkpoint(&a.model, None)?;
    let run_cfg: Option<TrainConfig> = match a.model.parent().map(|d| d.join("config.json")) {
        Some(p) if p.exists() => Some(read_json(&p)?),
        _ => None,
    };
    let arch = Architecture::of(&net)?;
    let timestep = a
        .timestep
        .or(run_cfg.as_ref().map(|c| c.timestep))
        .ok_or_else(|| Error::Config("--timestep is required without a run config.json".into()))?;
    let overlap = match arch {
        Architecture::Piggyback => a
            .overlap
            .or(run_cfg.as_ref().map(|c| c.overlap))
            .unwrap_or(0),
        _ => {
            if a.overlap.is_some_and(|m| m > 0) {
                return Err(Error::Config(format!("--overlap does not apply to a {arch} model")));
            }
            0
        }
    };
    let infer = InferenceConfig {
        timestep,
        overlap,
        retention: a.retention.into(),
    };
    let dataset = a.data.load()?;
    if net.classes() != dataset.num_classes() {
        return Err(Error::Architecture(format!(
            "model predicts {} classes, labels list {}",
            net.classes(),
            dataset.num_classes()
        )));
    }
    let sequences: Vec<DaySequence> = match (a.subset, &a.split) {
        (Subset::All, None) => dataset.sequences.clone(),
        (subset, Some(path)) => {
            let split = load_split(path)?;
            let ids = match subset {
                Subset::Train => split.train,
                Subset::Val => split.val,
                Subset::Test => split.test,
                Subset::All => dataset.sequences.iter().map(|s| s.sequence_id.clone()).collect(),
            };
            dataset.select(&ids)?
        }
        (_, None) => return Err(Error::Config("--subset needs --split".into())),
    };
    let timelines = sequences
        .iter()
        .map(|s| {
            predict_sequence(&net, s, &infer).map(|t| if a.no_probs { t.without_probs() } else { t })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&a.out_dir.join("timelines.json"), &timelines)?;
    println!(
        "predicted {} frames in {} sequences",
        timelines.iter().map(|t| t.frames.len()).sum::<usize>(),
        timelines.len()
    );
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let labels = LabelSet::read(&a.labels)?;
    let timelines: Vec<PredictionTimeline> = read_json(&a.timelines)?;
    let cm = confusion_from_timelines(&timelines, labels.len())?;
    let report = macro_report(&cm)?;
    write_reports(&a.out_dir, &labels, &cm, &report)?;
    println!(
        "accuracy {:.4} macro_precision {:.4} macro_recall {:.4} macro_f1 {:.4}",
        report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
    );
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchGradCheck {
    pub architecture: Architecture,
    pub report: GradCheckReport,
}

/// Gradient check on a small seeded model: 3 inputs, hidden width 4, 3
/// classes, a 5-step window with one padded step and dropout 0.5. The
/// piggyback model carries two random rows into its first two positions.
pub fn builtin_gradcheck(
    architecture: Architecture,
    seed: u64,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    const INPUT: usize = 3;
    const HIDDEN: usize = 4;
    const CLASSES: usize = 3;
    const STEPS: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = LayerStack::init(architecture.shape(INPUT, HIDDEN, CLASSES), &mut rng)?;
    let rows: Vec<Vec<f64>> = (0..STEPS)
        .map(|_| (0..INPUT).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let inputs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..STEPS).map(|_| rng.random_range(0..CLASSES)).collect();
    let mut mask = vec![true; STEPS];
    mask[STEPS - 1] = false;
    let dropout = match architecture {
        Architecture::Baseline => DropoutSpec::none(),
        _ => DropoutSpec::new(0.5, rng.random())?,
    };
    let carry_mask = CarryMask::for_batch(STEPS, 2, 1);
    let mut store = CarryStore::new(2);
    if architecture == Architecture::Piggyback {
        let carried: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..HIDDEN).map(|_| rng.random_range(-0.9..0.9)).collect())
            .collect();
        store.store(&carried)?;
    }
    let carry = (architecture == Architecture::Piggyback).then_some((&carry_mask, &store));
    grad_check(
        &net,
        &inputs,
        &labels,
        &mask,
        carry,
        &dropout,
        epsilon,
        tolerance,
        None,
        seed,
    )
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let archs = match a.arch {
        Some(arch) => vec![arch.into()],
        None => vec![Architecture::Baseline, Architecture::Sliding, Architecture::Piggyback],
    };
    let mut results = Vec::new();
    for architecture in archs {
        let report = builtin_gradcheck(architecture, a.seed, a.epsilon, a.tolerance)?;
        println!(
            "{architecture}: max relative error {:.3e} ({})",
            report.max_rel_error,
            if report.passed { "pass" } else { "FAIL" }
        );
        results.push(ArchGradCheck {
            architecture,
            report,
        });
    }
    write_json(&a.out_dir.join("gradcheck.json"), &results)?;
    if results.iter().all(|r| r.report.passed) {
        Ok(0)
    } else {
        Ok(3)
    }
}
