use std::fs;
use std::path::Path;
use std::process::Command;

use rrrn::report::read_report;

fn rrrn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rrrn")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = "\
# tiny run
data.manifest = data/manifest.tsv
data.landmarks = data/landmarks
data.assets = data/assets
epochs = 2
batch_size = 4
backbone.input_size = 8
augmentation_enabled = false
flow.preset = fast
seed = 4
";

#[test]
fn usage_errors_exit_with_two() {
    let (code, _, err) = rrrn(&["run", "--bogus"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = rrrn(&["frobnicate"]);
    assert_eq!(code, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let (code, _, err) = rrrn(&["run", "--task", "cde", "--occlusion", "sideways", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = rrrn(&["--help"]);
    assert_eq!(code, 0);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "epochs = 2\nmystery = 1\n").unwrap();
    let (code, _, err) = rrrn(&["run", "--task", "cde", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("line 2"), "{err}");
    fs::write(&cfg, "epochs = 2\n").unwrap();
    let (code, _, err) = rrrn(&["run", "--task", "cde", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("data.manifest"), "{err}");
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (code, _, err) = rrrn(&["-q", "generate", "--out", s(&root.join("data")), "--subjects", "3", "--per-subject", "2", "--size", "24"]);
    assert_eq!(code, 0, "{err}");
    let cfg = root.join("c.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let run = |out: &str| rrrn(&["-q", "run", "--task", "cde", "--occlusion", "random20", "--config", s(&cfg), "--out", s(&root.join(out))]);
    let (code, stdout, err) = run("a");
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("pooled_confusion"), "{stdout}");
    let report = read_report(&root.join("a/report.json")).unwrap();
    assert_eq!(report.folds.len(), 3);
    assert_eq!(report.occlusion, "RANDOM_20");
    for fold in ["subject_s00", "subject_s01", "subject_s02"] {
        let d = root.join("a/checkpoints").join(fold);
        assert!(d.join("final.ckpt").exists() && d.join("latest.ckpt").exists());
        let log = fs::read_to_string(d.join("train_log.tsv")).unwrap();
        assert_eq!(log.lines().count(), 3, "{log}");
    }
    assert_eq!(run("b").0, 0);
    assert_eq!(fs::read(root.join("a/report.json")).unwrap(), fs::read(root.join("b/report.json")).unwrap());
    // Rerunning into the same directory reuses the caches and gives the same report.
    assert_eq!(run("a").0, 0);
    assert_eq!(fs::read(root.join("a/report.json")).unwrap(), fs::read(root.join("b/report.json")).unwrap());
    let (code, stdout, _) = rrrn(&["report", "--in", s(&root.join("a/report.json"))]);
    assert_eq!(code, 0);
    assert!(stdout.contains("RANDOM_20"));
}

#[test]
fn stepwise_commands_match_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(rrrn(&["-q", "generate", "--out", s(&root.join("data")), "--subjects", "2", "--per-subject", "2", "--size", "24"]).0, 0);
    let cfg = root.join("c.cfg");
    fs::write(&cfg, CONFIG.replace("augmentation_enabled = false", "augmentation_enabled = true").replace("epochs = 2", "epochs = 1")).unwrap();
    let manifest = root.join("data/manifest.tsv");
    let cache = root.join("cache");
    let (code, stdout, _) = rrrn(&["ingest", "--in", s(&manifest)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("4 records kept"), "{stdout}");
    let data = ["--config", s(&cfg), "--in", s(&manifest), "--cache", s(&cache)];
    assert_eq!(rrrn(&[&["-q", "preprocess"][..], &data].concat()).0, 0);
    assert_eq!(rrrn(&[&["-q", "augment"][..], &data].concat()).0, 0);
    assert_eq!(fs::read_dir(cache.join("aug/syn_s00_00")).unwrap().count(), 70);
    let ck = root.join("ck");
    let (code, _, err) = rrrn(&[&["-q", "train"][..], &data, &["--task", "cde", "--fold", "subject_s01", "--out", s(&ck)]].concat());
    assert_eq!(code, 0, "{err}");
    assert!(ck.join("subject_s01/final.ckpt").exists());
    assert!(!ck.join("subject_s00").exists());
    let report = root.join("r.json");
    let (code, _, err) = rrrn(&[&["-q", "eval"][..], &data, &["--task", "cde", "--fold", "subject_s01", "--checkpoints", s(&ck), "--out", s(&report)]].concat());
    assert_eq!(code, 0, "{err}");
    assert_eq!(read_report(&report).unwrap().folds.len(), 1);
    let (code, _, _) = rrrn(&[&["-q", "train"][..], &data, &["--task", "cde", "--fold", "nobody", "--out", s(&ck)]].concat());
    assert_eq!(code, 2);
}
