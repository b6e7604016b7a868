use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_egolstm");
const SUBCOMMANDS: [&str; 6] = ["synth", "split", "train", "predict", "eval", "gradcheck"];

fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(BIN).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> split on a small dataset; returns (data dir, split.json).
fn prepare(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    ok(run(["synth", "--out-dir", p(&data), "--sequences", "8", "--frames", "60", "--seed", "3"]));
    let split_dir = root.join("split");
    ok(run([
        "split", "--manifest", p(&data.join("manifest.json")), "--out-dir", p(&split_dir),
        "--bins", "4", "--test-bins", "1", "--val-bins", "1",
    ]));
    (data, split_dir.join("split.json"))
}

#[test]
fn help_documents_every_flag() {
    ok(run(["--help"]));
    for sub in SUBCOMMANDS {
        let out = ok(run([sub, "--help"]));
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut flags = 0;
        for (i, line) in lines.iter().enumerate() {
            let trimmed = line.trim_start();
            if !trimmed.starts_with('-') {
                continue;
            }
            flags += 1;
            let spec_end = trimmed.find("  ").unwrap_or(trimmed.len());
            let inline = trimmed[spec_end..].trim();
            let below = lines
                .get(i + 1)
                .map(|l| l.starts_with("          ") && !l.trim_start().starts_with('-'))
                .unwrap_or(false);
            assert!(!inline.is_empty() || below, "{sub}: undocumented flag {trimmed:?}");
        }
        assert!(flags >= 2, "{sub}: no flags listed");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(["bogus"])), 1);
    assert_eq!(code(&run(["synth", "--out-dir", "x", "--no-such-flag"])), 1);
    assert_eq!(code(&run(Vec::<&str>::new())), 1);
    let dir = tempfile::tempdir().unwrap();
    let (data, split) = prepare(dir.path());
    let manifest = data.join("manifest.json");
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--manifest", p(&manifest), "--split", p(&split)];
        let out = dir.path().join("run");
        args.extend_from_slice(&["--out-dir", p(&out)]);
        args.extend_from_slice(extra);
        code(&run(args))
    };
    assert_eq!(train(&["--arch", "piggyback", "--timestep", "5", "--overlap", "5"]), 1);
    assert_eq!(train(&["--arch", "piggyback", "--timestep", "5"]), 1);
    assert_eq!(train(&["--arch", "sliding", "--overlap", "2"]), 1);
    assert_eq!(train(&["--arch", "baseline", "--phase", "1"]), 1);
    assert_eq!(train(&["--arch", "piggyback", "--timestep", "5", "--overlap", "2", "--phase", "2"]), 1);
    assert_eq!(train(&["--arch", "sliding", "--momentum", "1.5"]), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("o");
    assert_eq!(
        code(&run(["split", "--manifest", p(&missing), "--out-dir", p(&out), "--bins", "4", "--test-bins", "1", "--val-bins", "1"])),
        2
    );
    let garbage = dir.path().join("timelines.json");
    std::fs::write(&garbage, "{not json").unwrap();
    let labels = dir.path().join("labels.txt");
    std::fs::write(&labels, "a\nb\n").unwrap();
    assert_eq!(code(&run(["eval", "--timelines", p(&garbage), "--labels", p(&labels), "--out-dir", p(&out)])), 2);
}

#[test]
fn gradcheck_seed_seven_passes() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(["gradcheck", "--seed", "7", "--out-dir", p(dir.path())]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let archs = report.as_array().unwrap();
    assert_eq!(archs.len(), 3);
    for a in archs {
        let err = a["report"]["max_rel_error"].as_f64().unwrap();
        assert!(err < 1e-5, "{}: {err}", a["architecture"]);
        assert_eq!(a["report"]["passed"], true);
    }
}

#[test]
fn long_timestep_schedule_flags_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let (data, split) = prepare(dir.path());
    let out = dir.path().join("run");
    ok(run([
        "train", "--manifest", p(&data.join("manifest.json")), "--split", p(&split), "--out-dir", p(&out),
        "--arch", "sliding", "--timestep", "15", "--lr", "1e-4", "--momentum", "0.9", "--weight-decay", "5e-6",
        "--epochs", "2", "--hidden", "8",
    ]));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["timestep"], 15);
    assert_eq!(cfg["lr"], 1e-4);
    assert_eq!(cfg["momentum"], 0.9);
    assert_eq!(cfg["weight_decay"], 5e-6);
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let (data, split) = prepare(root);
    let manifest = data.join("manifest.json");
    let run_dir = root.join("run");
    ok(run([
        "train", "--manifest", p(&manifest), "--split", p(&split), "--out-dir", p(&run_dir),
        "--arch", "piggyback", "--timestep", "6", "--overlap", "2", "--hidden", "8", "--lr", "0.05",
        "--epochs", "2", "--seed", "5",
    ]));
    let pred_dir = root.join("pred");
    ok(run([
        "predict", "--manifest", p(&manifest), "--model", p(&run_dir.join("best.egomdl")), "--split", p(&split),
        "--subset", "test", "--out-dir", p(&pred_dir),
    ]));
    let eval_dir = root.join("eval");
    ok(run([
        "eval", "--timelines", p(&pred_dir.join("timelines.json")), "--labels", p(&data.join("labels.txt")),
        "--out-dir", p(&eval_dir),
    ]));
    let gc_dir = root.join("gc");
    ok(run(["gradcheck", "--seed", "11", "--arch", "sliding", "--out-dir", p(&gc_dir)]));
    let mut files = vec![
        data.join("manifest.json"),
        data.join("labels.txt"),
        split,
        run_dir.join("config.json"),
        run_dir.join("report.json"),
        run_dir.join("best.egomdl"),
        run_dir.join("last.egomdl"),
        pred_dir.join("timelines.json"),
        eval_dir.join("report.json"),
        eval_dir.join("confusion.csv"),
        eval_dir.join("confusion_normalized.csv"),
        gc_dir.join("gradcheck.json"),
    ];
    let mut seqs: Vec<_> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "egoseq"))
        .collect();
    seqs.sort();
    files.extend(seqs);
    files
        .into_iter()
        .map(|f| {
            let name = f.strip_prefix(root).unwrap().display().to_string();
            let bytes = std::fs::read(&f).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, bytes)
        })
        .collect()
}

#[test]
fn seeded_pipeline_is_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    assert_eq!(first.len(), second.len());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if name.ends_with(".json") {
            let strip = |bytes: &[u8]| String::from_utf8_lossy(bytes).replace(p(a.path()), "").replace(p(b.path()), "");
            assert_eq!(strip(x), strip(y), "{name}");
        } else {
            assert_eq!(x, y, "{name}");
        }
    }
    let report: serde_json::Value =
        serde_json::from_slice(&first.iter().find(|(n, _)| n == "eval/report.json").unwrap().1).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
