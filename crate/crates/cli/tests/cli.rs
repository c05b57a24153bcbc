use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn signprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signprop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const BLOBS: &str = r#"
seed = 2
epochs = 2

[feedback]
rule = "ss"
last_layer = "bp"

[optimizer]
kind = "sgd"
lr = 0.05
momentum = 0.9

[dataset]
kind = "blobs"
classes = 3
dim = 4
per_class = 30
spread = 0.4

[[layers]]
kind = "dense"
units = 6
relu = true

[[layers]]
kind = "dense"
units = 3
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let out = dir.path().join("out");
    let o = signprop(&["train", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ss+last-bp seed 2"));
    for f in ["metrics.csv", "summary.json", "run.log", "snapshot/manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn train_seed_flag_and_replicas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let out = dir.path().join("single");
    let o = signprop(&["train", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(stdout(&o).contains("seed 9"));

    let out = dir.path().join("many");
    let o = signprop(&["train", &cfg, "--seeds", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    for k in 1..=3 {
        assert!(out.join(format!("seed-{k}/metrics.csv")).is_file());
    }
}

#[test]
fn identical_invocations_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let read = |name: &str| {
        let out = dir.path().join(name);
        signprop(&["train", &cfg, "--out", out.to_str().unwrap()]);
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BLOBS.replace("\"ss\"", "\"sf\""));
    let o = signprop(&["train", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.toml"));
}

#[test]
fn gradcheck_passes_on_sample_config() {
    let o = signprop(&["gradcheck", configs().join("gradcheck.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).ends_with("gradcheck passed\n"));
}

#[test]
fn gradcheck_names_a_corrupted_layer() {
    let cfg = configs().join("gradcheck.toml");
    let o = signprop(&["gradcheck", cfg.to_str().unwrap(), "--flip-sign-layer", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAILED at layers: 3\n"), "{}", stdout(&o));
}

#[test]
fn diagnose_reads_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let out = dir.path().join("out");
    signprop(&["train", &cfg, "--out", out.to_str().unwrap()]);
    let o = signprop(&["diagnose", out.join("snapshot").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("setting ss+last-bp seed 2 epoch 2\n"), "{text}");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn diagnose_missing_directory_fails() {
    let o = signprop(&["diagnose", "/nonexistent/snapshot"]);
    assert_eq!(o.status.code(), Some(2));
}
