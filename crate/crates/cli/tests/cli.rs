use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "dataset": { "n_classes": 40, "images_per_class": 6 },
  "detector": { "epochs": 3 },
  "synthesis": { "epochs": 4, "net": { "heads": 2, "head_dim": 8 } },
  "sweep": { "levels": [0.0, 0.5], "runs": 2, "workers": 1 }
}"#;

fn zsla(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsla"))
        .arg("--config")
        .arg(root.join("small.json"))
        .arg("--out")
        .arg(root.join("out"))
        .args(args)
        .env_remove("ZSLA_OUT")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = zsla(root, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "zsla {args:?} failed: {stderr}");
    String::from_utf8_lossy(&out.stdout).into_owned() + &stderr
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.json"), CONFIG).unwrap();
    tmp
}

#[test]
fn stages_chain_through_their_artifacts() {
    let tmp = setup();
    let root = tmp.path();
    let out = root.join("out");
    ok(root, &["gen-data", "--walr", "0.2"]);
    for f in ["manifest.json", "features.bin", "labels.csv", "noisy_labels.csv", "config.json"] {
        assert!(out.join("data").join(f).exists(), "data/{f}");
    }
    ok(root, &["train-seen", "--pooling", "max", "--epochs", "2"]);
    let seen_cfg = fs::read_to_string(out.join("seen/config.json")).unwrap();
    assert!(seen_cfg.contains("\"pooling\": \"max\"") && seen_cfg.contains("\"epochs\": 2"));
    assert_eq!(fs::read_to_string(out.join("seen/seen_curve.csv")).unwrap().lines().count(), 3);
    ok(root, &["train-dnr"]);
    ok(root, &["synthesize"]);
    assert!(out.join("synth/synthesized_bank.bin").exists() && out.join("synth/bases.csv").exists());
    let log = ok(root, &["evaluate", "--no-direct"]);
    assert!(log.contains("role=synthesized"), "{log}");
    assert!(!out.join("eval/direct_bank.bin").exists());
    let metrics = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("role,split,seed,walr,attribute"));
    ok(root, &["gzsl", "--per-attribute"]);
    for f in ["annotations.csv", "class_attributes_zsla.csv", "class_attributes_manual.csv", "report.json"] {
        assert!(out.join("gzsl").join(f).exists(), "gzsl/{f}");
    }
}

#[test]
fn missing_prerequisite_is_reported() {
    let tmp = setup();
    let out = zsla(tmp.path(), &["train-seen"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gen-data"), "{stderr}");

    ok(tmp.path(), &["gen-data"]);
    let out = zsla(tmp.path(), &["synthesize"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-seen"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = setup();
    let root = tmp.path();
    let out = root.join("out");
    let mut first = Vec::new();
    for pass in 0..2 {
        ok(root, &["--seed", "5", "gen-data", "--walr", "0.1"]);
        ok(root, &["--seed", "5", "train-seen"]);
        let files: Vec<Vec<u8>> = ["data/features.bin", "data/noisy_labels.csv", "seen/seen_bank.bin", "seen/seen_curve.csv"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        if pass == 0 {
            first = files;
        } else {
            assert!(first == files);
        }
    }
}

#[test]
fn sweep_writes_summary() {
    let tmp = setup();
    let log = ok(tmp.path(), &["sweep", "--levels", "0,0.3", "--runs", "2"]);
    assert!(log.contains("event=sweep_level"), "{log}");
    let summary = fs::read_to_string(tmp.path().join("out/sweep/sweep_summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.starts_with("0,") || l.starts_with("0.3,")));
}

#[test]
fn bad_flags_are_rejected() {
    let tmp = setup();
    let out = zsla(tmp.path(), &["gen-data", "--walr", "2"]);
    assert!(!out.status.success());
    let out = zsla(tmp.path(), &["train-seen", "--pooling", "mean"]);
    assert!(!out.status.success());
}
