//! Confusion matrices and macro-averaged metrics over prediction timelines.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::LabelSet;
use crate::error::{Error, Result};
use crate::models::PredictionTimeline;

pub const MACRO_CONVENTION: &str = "undefined per-class precision/recall (zero denominator) counts as 0 \
     and is included in the unweighted macro mean over all classes; padded frames are excluded";

/// `counts[t][p]` = frames with true label `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.num_classes();
        for label in [truth, pred] {
            if label >= k {
                return Err(Error::Data(format!("label {label} out of range for {k} classes")));
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape("merging confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        self.counts[t].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        self.counts.iter().map(|r| r[p]).sum()
    }
}

pub fn confusion_from_timelines(
    timelines: &[PredictionTimeline],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for tl in timelines {
        for f in &tl.frames {
            cm.add(f.truth, f.pred)?;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub frames: u64,
    pub convention: String,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix has no frames".into()));
    }
    let k = cm.num_classes();
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let p = ratio(tp, cm.col_sum(c));
        let r = ratio(tp, cm.row_sum(c));
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        frames: total,
        convention: MACRO_CONVENTION.to_string(),
    })
}

/// Row-normalized matrix; empty rows stay zero.
pub fn normalize_confusion(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.counts
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().sum();
            row.iter().map(|&c| ratio(c, sum)).collect()
        })
        .collect()
}

fn write_csv(path: &Path, labels: &LabelSet, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(labels.names().iter().cloned());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in labels.names().iter().zip(rows) {
        let mut rec = vec![name.clone()];
        rec.extend(row);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `report.json`, `confusion.csv` and `confusion_normalized.csv` under `dir`.
pub fn write_reports(
    dir: impl AsRef<Path>,
    labels: &LabelSet,
    cm: &ConfusionMatrix,
    report: &MetricsReport,
) -> Result<()> {
    let dir = dir.as_ref();
    if labels.len() != cm.num_classes() {
        return Err(Error::Shape(format!(
            "{} label names for a {}-class matrix",
            labels.len(),
            cm.num_classes()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(report)?)
        .map_err(|e| Error::io(&report_path, e))?;
    let counts = cm
        .counts
        .iter()
        .map(|r| r.iter().map(u64::to_string).collect())
        .collect();
    write_csv(&dir.join("confusion.csv"), labels, counts)?;
    let norm = normalize_confusion(cm)
        .into_iter()
        .map(|r| r.into_iter().map(|v| format!("{v:.6}")).collect())
        .collect();
    write_csv(&dir.join("confusion_normalized.csv"), labels, norm)
}
