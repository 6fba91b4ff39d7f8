use std::path::Path;
use std::process::Command;

const SMOKE: &str = r#"{
  "model": {"arch": "da_lstm", "hidden": 8, "cells": 2},
  "train": {"max_epochs": 1, "batch_size": 8},
  "data": {"synth": {"sequences": 30, "steps": 20, "input_dim": 4, "num_classes": 3}}
}"#;

fn adaseq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_adaseq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, SMOKE).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn smoke_train_emits_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let started = std::time::Instant::now();
    let res = adaseq(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(started.elapsed().as_secs() < 60);
    for f in ["epochs.csv", "summary.json"] {
        assert!(out.join("da_lstm").join(f).is_file(), "{f}");
    }
    for f in ["portion_summary.csv", "comparison.csv", "config.json", "dataset.bin"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!out.join("INCOMPLETE").exists());

    let res = adaseq(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("eval.json").is_file());
}

#[test]
fn sweep_fans_out_into_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("sweep");
    let res = adaseq(&[
        "sweep",
        "--config",
        &cfg,
        "--set",
        "sweep.transient_ratio=[0.3,0.5]",
        "--set",
        "model.hidden=4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for point in ["r_0.3", "r_0.5"] {
        let dir = out.join(point);
        for f in ["config.json", "dataset.bin", "portion_summary.csv", "comparison.csv"] {
            assert!(dir.join(f).is_file(), "{point}/{f}");
        }
        assert!(dir.join("da_lstm/epochs.csv").is_file());
        let resolved = std::fs::read_to_string(dir.join("config.json")).unwrap();
        assert!(resolved.contains("\"hidden\": 4"));
    }
    let summary = std::fs::read_to_string(out.join("portion_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn invalid_config_fails_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("bad");
    let res = adaseq(&["train", "--config", &cfg, "--set", "model.cells=1", "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));
    assert!(!out.exists());

    let res = adaseq(&["train", "--config", "/nonexistent.json", "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(!out.exists());
}

#[test]
fn data_prepare_and_gradcheck() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("data");
    let res = adaseq(&["data", "prepare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("dataset.bin").is_file());
    assert!(String::from_utf8_lossy(&res.stdout).contains("24 train / 3 validation / 3 test"));

    let out = tmp.path().join("gc");
    let res = adaseq(&[
        "gradcheck",
        "--config",
        &cfg,
        "--set",
        "model.hidden=3",
        "--set",
        "gradcheck.steps=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("PASS da_lstm"));
    assert!(out.join("gradcheck.json").is_file());
}

#[test]
fn env_var_overrides_dataset_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("pamap.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"arch": "da_lstm", "hidden": 4, "cells": 2},
            "data": {"pamap2": {"root": "/does/not/exist"}}}"#,
    )
    .unwrap();
    let out = tmp.path().join("p");
    let missing = tmp.path().join("also_missing");
    let res = Command::new(env!("CARGO_BIN_EXE_adaseq"))
        .args(["data", "prepare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("ADASEQ_DATA_ROOT", &missing)
        .output()
        .unwrap();
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("also_missing"), "{err}");
}
