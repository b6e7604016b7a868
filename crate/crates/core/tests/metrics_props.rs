use egolstm::datamodel::LabelSet;
use egolstm::evaluation::{
    confusion_from_timelines, macro_report, normalize_confusion, write_reports, ConfusionMatrix,
};
use egolstm::models::{FramePrediction, PredictionTimeline};
use proptest::prelude::*;

fn timeline(pairs: &[(usize, usize)]) -> PredictionTimeline {
    PredictionTimeline {
        sequence_id: "s".into(),
        frames: pairs
            .iter()
            .enumerate()
            .map(|(index, &(truth, pred))| FramePrediction {
                index,
                truth,
                pred,
                probs: vec![],
            })
            .collect(),
    }
}

const K: usize = 5;

fn pairs() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..K, 0..K), 1..300)
}

proptest! {
    #[test]
    fn macro_metrics_survive_relabeling(
        frames in pairs(),
        perm in Just((0..K).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let a = macro_report(&confusion_from_timelines(&[timeline(&frames)], K).unwrap()).unwrap();
        let relabeled: Vec<(usize, usize)> = frames.iter().map(|&(t, p)| (perm[t], perm[p])).collect();
        let b = macro_report(&confusion_from_timelines(&[timeline(&relabeled)], K).unwrap()).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
        prop_assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
        for c in 0..K {
            prop_assert_eq!(a.f1[c], b.f1[perm[c]]);
            prop_assert_eq!(a.precision[c], b.precision[perm[c]]);
        }
    }

    #[test]
    fn accumulation_is_additive(parts in prop::collection::vec(pairs(), 1..6)) {
        let timelines: Vec<PredictionTimeline> = parts.iter().map(|p| timeline(p)).collect();
        let joint = confusion_from_timelines(&timelines, K).unwrap();
        let mut merged = ConfusionMatrix::zeros(K);
        for t in timelines.iter().rev() {
            merged.merge(&confusion_from_timelines(std::slice::from_ref(t), K).unwrap()).unwrap();
        }
        prop_assert_eq!(&joint, &merged);
        let concatenated: Vec<(usize, usize)> = parts.concat();
        let r = macro_report(&joint).unwrap();
        prop_assert_eq!(r, macro_report(&confusion_from_timelines(&[timeline(&concatenated)], K).unwrap()).unwrap());
        let correct = concatenated.iter().filter(|(t, p)| t == p).count();
        prop_assert_eq!(macro_report(&joint).unwrap().accuracy, correct as f64 / concatenated.len() as f64);
    }
}

#[test]
fn hand_example_and_absent_classes() {
    let cm = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![0, 2]]).unwrap();
    let r = macro_report(&cm).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-15);

    let cm = ConfusionMatrix::from_counts(vec![vec![2, 0, 0], vec![0, 0, 0], vec![1, 0, 1]]).unwrap();
    let r = macro_report(&cm).unwrap();
    assert_eq!(r.precision[1], 0.0);
    assert_eq!(r.recall[1], 0.0);
    assert!((r.macro_recall - (1.0 + 0.0 + 0.5) / 3.0).abs() < 1e-15);
    assert!(!r.convention.is_empty());
    let norm = normalize_confusion(&cm);
    assert_eq!(norm[1], vec![0.0, 0.0, 0.0]);
    assert_eq!(norm[2], vec![0.5, 0.0, 0.5]);
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelSet::new(vec!["walk".into(), "eat".into()]).unwrap();
    let cm = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![0, 2]]).unwrap();
    write_reports(dir.path(), &labels, &cm, &macro_report(&cm).unwrap()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    assert_eq!(csv, "true\\pred,walk,eat\nwalk,1,1\neat,0,2\n");
    let norm = std::fs::read_to_string(dir.path().join("confusion_normalized.csv")).unwrap();
    assert!(norm.contains("walk,0.500000,0.500000"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["accuracy"], 0.75);
}

#[test]
fn out_of_range_label_is_rejected() {
    assert!(confusion_from_timelines(&[timeline(&[(0, 7)])], 3).is_err());
}
