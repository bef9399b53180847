//! Integration tests for the binary's contract: exit codes, config
//! rejection, and artifact outputs.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuroctl"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn fast_train_config(dir: &std::path::Path) -> PathBuf {
    let cfg = serde_json::json!({
        "stack": {"n_hidden": 16, "gru_hidden": 12, "history": 4},
        "trainer": {"epochs": 3, "seed": 5},
        "demos": {"n": 2},
        "out_dir": dir.join("out").to_string_lossy(),
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_config_file_exits_2() {
    let status = bin()
        .args(["train", "--config", "/nonexistent/nope.json"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2_with_location() {
    let dir = tmp("bad_key");
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{ "no_such_key": true }"#).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "{err}");
}

#[test]
fn unknown_experiment_exits_2() {
    let status = bin()
        .args(["experiment", "not_a_protocol"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_export_artifact_exits_2() {
    let dir = tmp("bad_artifact");
    let status = bin()
        .args(["export", "hologram", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_loss_and_metrics() {
    let dir = tmp("train_ok");
    let cfg = fast_train_config(&dir);
    let out = dir.join("out");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("checkpoint.nckp").exists());
    assert!(out.join("loss.csv").exists());
    assert!(out.join("metrics.json").exists());
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,loss\n"));
    // Timestamps live only in the sidecar log.
    assert!(out.join("run.log").exists());
}

#[test]
fn exports_from_a_trained_checkpoint() {
    let dir = tmp("exports");
    let cfg = fast_train_config(&dir);
    let out = dir.join("out");
    assert_eq!(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let ckpt = out.join("checkpoint.nckp");

    let act_dir = dir.join("activity");
    assert_eq!(
        bin()
            .args(["export", "activity", "--checkpoint"])
            .arg(&ckpt)
            .arg("--out")
            .arg(&act_dir)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let csv = std::fs::read_to_string(act_dir.join("activity.csv")).unwrap();
    assert!(csv.starts_with("step,layer,rate\n"));
    // 48-tick default rollout over two blocks.
    assert_eq!(csv.lines().count(), 1 + 48 * 2);

    let map_dir = dir.join("kmap");
    assert_eq!(
        bin()
            .args(["export", "kinematic_map", "--checkpoint"])
            .arg(&ckpt)
            .arg("--out")
            .arg(&map_dir)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let map = std::fs::read_to_string(map_dir.join("kinematic_map.csv")).unwrap();
    assert!(map.starts_with("dim,neuron,rate,defined\n"));
    assert_eq!(map.lines().count(), 1 + 7 * 16);
}

#[test]
fn attention_export_rows_sum_to_one() {
    let dir = tmp("attention_export");
    assert_eq!(
        bin()
            .args(["export", "attention", "--out"])
            .arg(&dir)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let csv = std::fs::read_to_string(dir.join("attention_map.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        let mut parts = line.split(',');
        let q: usize = parts.next().unwrap().parse().unwrap();
        let _t = parts.next().unwrap();
        let w: f64 = parts.next().unwrap().parse().unwrap();
        *sums.entry(q).or_insert(0.0) += w;
    }
    assert!(!sums.is_empty());
    for (_, s) in sums {
        assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
    }
}

#[test]
fn systolic_experiment_passes_from_binary() {
    let dir = tmp("systolic_cli");
    let status = bin()
        .args(["experiment", "systolic", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("systolic/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["pass"], serde_json::json!(true));
}
