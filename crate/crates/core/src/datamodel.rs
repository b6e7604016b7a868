//! Day sequences, label sets, the `.egoseq` binary format, dataset manifests
//! and the synthetic context-dependent generator.
//!
//! `.egoseq` layout (little-endian):
//!
//! ```text
//! magic   "EGOSEQ01"        8 bytes
//! L       u32               frame count
//! D       u32               feature dimension
//! flags   u8                bit 0: timestamps present
//! feats   L*D f32           row-major
//! labels  L u16
//! times   L u32             only when flag bit 0 is set (minutes since midnight)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEQUENCE_MAGIC: &[u8; 8] = b"EGOSEQ01";
const FLAG_TIMESTAMPS: u8 = 1;

/// Ordered category names; a label id is the position in this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "a label set needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > u16::MAX as usize {
            return Err(Error::Config("label ids must fit in 16 bits".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Config("empty category name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate category name {name:?}")));
            }
        }
        Ok(LabelSet { names })
    }

    /// `class_0`, `class_1`, ... for generated data.
    pub fn numbered(k: usize) -> Result<Self> {
        LabelSet::new((0..k).map(|i| format!("class_{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Reads `labels.txt`: one category per line, line index = id.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        LabelSet::new(names)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Row-major `rows x cols` matrix of finite per-frame features.
///
/// Files store single precision; in memory everything is `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} feature values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature at frame {}, dim {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        FeatureMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// All annotated frames of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySequence {
    pub sequence_id: String,
    pub user_id: String,
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub timestamps: Option<Vec<u32>>,
}

impl DaySequence {
    pub fn new(
        sequence_id: impl Into<String>,
        user_id: impl Into<String>,
        features: FeatureMatrix,
        labels: Vec<usize>,
        timestamps: Option<Vec<u32>>,
    ) -> Result<Self> {
        let seq = DaySequence {
            sequence_id: sequence_id.into(),
            user_id: user_id.into(),
            features,
            labels,
            timestamps,
        };
        seq.check_shape()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn check_shape(&self) -> Result<()> {
        let l = self.features.rows();
        if self.labels.len() != l {
            return Err(Error::Precondition(format!(
                "sequence {}: {} labels for {l} frames",
                self.sequence_id,
                self.labels.len()
            )));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != l {
                return Err(Error::Precondition(format!(
                    "sequence {}: {} timestamps for {l} frames",
                    self.sequence_id,
                    ts.len()
                )));
            }
            if ts.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Data(format!(
                    "sequence {}: timestamps decrease",
                    self.sequence_id
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y > u16::MAX as usize) {
            return Err(Error::Label {
                label: bad,
                classes: u16::MAX as usize + 1,
            });
        }
        Ok(())
    }

    /// Full invariant check against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_set: LabelSet,
    pub sequences: Vec<DaySequence>,
}

impl Dataset {
    pub fn new(label_set: LabelSet, sequences: Vec<DaySequence>) -> Result<Self> {
        let mut ids = HashSet::new();
        let dim = sequences.first().map(DaySequence::dim);
        for seq in &sequences {
            seq.validate(label_set.len())?;
            if !ids.insert(seq.sequence_id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate sequence id {:?}",
                    seq.sequence_id
                )));
            }
            if Some(seq.dim()) != dim {
                return Err(Error::Shape(format!(
                    "sequence {} has feature dim {}, expected {}",
                    seq.sequence_id,
                    seq.dim(),
                    dim.unwrap_or(0)
                )));
            }
        }
        Ok(Dataset {
            label_set,
            sequences,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.sequences.first().map(DaySequence::dim)
    }

    pub fn get(&self, sequence_id: &str) -> Option<&DaySequence> {
        self.sequences.iter().find(|s| s.sequence_id == sequence_id)
    }

    /// Sequences with the given ids, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<Vec<DaySequence>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("unknown sequence id {id:?}")))
            })
            .collect()
    }
}

pub fn encode_sequence(seq: &DaySequence) -> Result<Vec<u8>> {
    seq.check_shape()?;
    let l = seq.len();
    let d = seq.dim();
    let ts_len = if seq.timestamps.is_some() { 4 * l } else { 0 };
    let mut out = Vec::with_capacity(17 + 4 * l * d + 2 * l + ts_len);
    out.extend_from_slice(SEQUENCE_MAGIC);
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(if seq.timestamps.is_some() {
        FLAG_TIMESTAMPS
    } else {
        0
    });
    for &v in seq.features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &seq.labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    if let Some(ts) = &seq.timestamps {
        for &t in ts {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes `.egoseq` bytes. Ids are left empty; callers fill them in.
pub fn decode_sequence(bytes: &[u8], label_set: &LabelSet) -> Result<DaySequence> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(8, "magic")
        .map_err(|_| Error::Format("file shorter than the magic".into()))?;
    if magic != SEQUENCE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected EGOSEQ01",
            String::from_utf8_lossy(magic)
        )));
    }
    let l = cur.u32("frame count")? as usize;
    let d = cur.u32("feature dim")? as usize;
    let flags = cur.take(1, "flags")?[0];
    if flags & !FLAG_TIMESTAMPS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    if l == 0 || d == 0 {
        return Err(Error::Format(format!("empty sequence header L={l} D={d}")));
    }
    let feats = cur.take(4 * l * d, "features")?;
    let values: Vec<f64> = feats
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let features = FeatureMatrix::new(l, d, values)?;
    let labels: Vec<usize> = cur
        .take(2 * l, "labels")?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= label_set.len()) {
        return Err(Error::Data(format!(
            "label id {bad} out of range for {} classes",
            label_set.len()
        )));
    }
    let timestamps = if flags & FLAG_TIMESTAMPS != 0 {
        Some(
            cur.take(4 * l, "timestamps")?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    DaySequence::new("", "", features, labels, timestamps)
}

/// Reads one `.egoseq` file. The sequence id defaults to the file stem.
pub fn read_sequence_file(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<DaySequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut seq = decode_sequence(&bytes, label_set)?;
    seq.sequence_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(seq)
}

pub fn write_sequence_file(seq: &DaySequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_sequence(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fraction of frames carrying each label over all given sequences.
pub fn category_distribution(sequences: &[DaySequence], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for seq in sequences {
        for &y in &seq.labels {
            *counts.get_mut(y).ok_or(Error::Label {
                label: y,
                classes: num_classes,
            })? += 1;
        }
    }
    normalize_counts(&counts)
}

pub(crate) fn normalize_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("no frames to count".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub user_id: String,
    pub path: String,
}

/// Loads every sequence listed in a manifest. Relative paths resolve against
/// the manifest's directory.
pub fn load_dataset(manifest: impl AsRef<Path>, label_set: LabelSet) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut sequences = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = resolve(base, &entry.path);
        let mut seq = read_sequence_file(&path, &label_set)?;
        seq.sequence_id = entry.sequence_id;
        seq.user_id = entry.user_id;
        sequences.push(seq);
    }
    Dataset::new(label_set, sequences)
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes `labels.txt`, `manifest.json` and one `<id>.egoseq` per sequence
/// under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset.label_set.write(dir.join("labels.txt"))?;
    let mut entries = Vec::with_capacity(dataset.sequences.len());
    for seq in &dataset.sequences {
        let file = format!("{}.egoseq", seq.sequence_id);
        write_sequence_file(seq, dir.join(&file))?;
        entries.push(ManifestEntry {
            sequence_id: seq.sequence_id.clone(),
            user_id: seq.user_id.clone(),
            path: file,
        });
    }
    let manifest = dir.join("manifest.json");
    fs::write(&manifest, serde_json::to_string_pretty(&entries)?)
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}

/// Generator settings for the context-dependent synthetic day sequences.
///
/// The two classes of `ambiguous_pair` share one emission mean, so a frame
/// alone cannot tell them apart; each one is only ever entered from its
/// predecessor in `context_map`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub ambiguous_pair: Option<(usize, usize)>,
    /// Predecessor classes of `ambiguous_pair.0` and `ambiguous_pair.1`.
    pub context_map: (usize, usize),
    pub self_transition_prob: f64,
    pub noise_sigma: f64,
    pub mean_scale: f64,
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 6,
            feature_dim: 16,
            ambiguous_pair: Some((4, 5)),
            context_map: (2, 3),
            self_transition_prob: 0.8,
            noise_sigma: 0.3,
            mean_scale: 1.0,
            num_sequences: 40,
            frames_per_sequence: 300,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let distinct_means = if self.ambiguous_pair.is_some() { k - 1 } else { k };
        if self.feature_dim < distinct_means {
            return Err(Error::Config(format!(
                "feature dim {} cannot hold {distinct_means} orthogonal class means",
                self.feature_dim
            )));
        }
        if let Some((a, b)) = self.ambiguous_pair {
            let (pa, pb) = self.context_map;
            if a == b || a >= k || b >= k {
                return Err(Error::Config(format!(
                    "ambiguous pair ({a}, {b}) must be two distinct ids < {k}"
                )));
            }
            for p in [pa, pb] {
                if p >= k || p == a || p == b {
                    return Err(Error::Config(format!(
                        "context class {p} must be < {k} and outside the ambiguous pair"
                    )));
                }
            }
        }
        if !(self.self_transition_prob > 0.0 && self.self_transition_prob < 1.0) {
            return Err(Error::Config(format!(
                "self-transition probability {} not in (0, 1)",
                self.self_transition_prob
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::Config("mean scale must be positive".into()));
        }
        if self.num_sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Config(
                "sequence count and length must be positive".into(),
            ));
        }
        Ok(())
    }

    fn predecessor_of(&self, class: usize) -> Option<usize> {
        match self.ambiguous_pair {
            Some((a, _)) if class == a => Some(self.context_map.0),
            Some((_, b)) if class == b => Some(self.context_map.1),
            _ => None,
        }
    }

    /// Classes reachable from `from` on a switch (never `from` itself).
    pub fn successors(&self, from: usize) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| c != from)
            .filter(|&c| self.predecessor_of(c).is_none_or(|p| p == from))
            .collect()
    }

    /// Basis index of each class's emission mean.
    pub fn basis_index(&self, class: usize) -> usize {
        match self.ambiguous_pair {
            Some((a, b)) => {
                let shared = a.min(b);
                let other = a.max(b);
                if class == other {
                    shared
                } else if class > other {
                    class - 1
                } else {
                    class
                }
            }
            None => class,
        }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<usize> = (0..cfg.num_classes)
        .filter(|&c| cfg.predecessor_of(c).is_none())
        .collect();
    let successors: Vec<Vec<usize>> = (0..cfg.num_classes).map(|c| cfg.successors(c)).collect();
    let width = (cfg.num_sequences.max(1) - 1).to_string().len();
    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    for s in 0..cfg.num_sequences {
        let l = cfg.frames_per_sequence;
        let mut labels = Vec::with_capacity(l);
        let mut class = starts[rng.random_range(0..starts.len())];
        for t in 0..l {
            if t > 0 && rng.random::<f64>() >= cfg.self_transition_prob {
                let next = &successors[class];
                class = next[rng.random_range(0..next.len())];
            }
            labels.push(class);
        }
        let mut data = Vec::with_capacity(l * cfg.feature_dim);
        for &y in &labels {
            let hot = cfg.basis_index(y);
            for j in 0..cfg.feature_dim {
                let mean = if j == hot { cfg.mean_scale } else { 0.0 };
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mean + cfg.noise_sigma * z);
            }
        }
        let features = FeatureMatrix::new(l, cfg.feature_dim, data)?;
        sequences.push(DaySequence::new(
            format!("day{s:0width$}"),
            format!("u{}", s % 3 + 1),
            features,
            labels,
            None,
        )?);
    }
    Dataset::new(LabelSet::numbered(cfg.num_classes)?, sequences)
}
