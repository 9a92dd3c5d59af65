//! The `scpt` binary driven as a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scpt::encoder::MIN_HISTORY;
use scpt::harness::EvalReport;
use scpt::split::SplitManifest;
use serde_json::Value;

fn scpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scpt")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = scpt(args);
    assert!(
        out.status.success(),
        "scpt {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small config rooted in `dir`.
fn write_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "data": {"dir": dir.join("data")},
        "synth": {"sensors": 8, "days": 14, "seed": 3},
        "pretrain": {"epochs": 2, "dim": 8},
        "train": {
            "epochs": 2,
            "max_batches_per_epoch": 3,
            "batch_size": 8,
            "backbone": {"hidden": 8, "skip": 8, "end": 16, "gate_hidden": 16}
        },
        "eval": {"batch_size": 128},
        "output": dir.join("runs")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// synth → split → fit-periodic → pretrain → train → eval; returns the report.
fn full_run(dir: &Path) -> EvalReport {
    let cfg = write_config(dir);
    let c = s(&cfg);
    for sub in ["synth", "split", "fit-periodic", "pretrain", "train", "eval"] {
        ok(&[sub, "--config", c]);
    }
    EvalReport::load(&dir.join("runs/report.json")).unwrap()
}

#[test]
fn synth_writes_a_readable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["synth", "--sensors", "5", "--days", "4", "--seed", "9", "--out", s(&data)]);
    let signals = std::fs::read_to_string(data.join("signals.csv")).unwrap();
    let mut lines = signals.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 6);
    assert_eq!(lines.count(), 4 * 288);
    assert!(data.join("adjacency.csv").exists());
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("run_manifest.json")).unwrap()).unwrap();
    assert!(manifest["synth"]["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn split_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["synth", "--sensors", "10", "--days", "4", "--out", s(&data)]);
    let (a, b, c) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("c.json"));
    ok(&["split", "--data", s(&data), "--seed", "4", "--out", s(&a)]);
    ok(&["split", "--data", s(&data), "--seed", "4", "--out", s(&b)]);
    ok(&["split", "--data", s(&data), "--seed", "5", "--out", s(&c)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (ma, mc) = (SplitManifest::load(&a).unwrap(), SplitManifest::load(&c).unwrap());
    assert_eq!((ma.t1, ma.t2), (mc.t1, mc.t2));
    assert_ne!(ma.train_sensors, mc.train_sensors);
}

#[test]
fn full_pipeline_and_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let report = full_run(dir.path());
    assert_eq!(report.horizons.len(), 12);
    assert!(report.average.mae.is_finite());
    assert!(report.median_mae_12.is_some());
    let runs = dir.path().join("runs");
    for artifact in ["split.json", "periodic", "encoder/pretrain_log.csv", "model/train_log.csv", "report.json"] {
        assert!(runs.join(artifact).exists(), "missing {artifact}");
    }
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("run_manifest.json")).unwrap()).unwrap();
    for sub in ["split", "fit-periodic", "pretrain", "train", "eval"] {
        assert!(manifest.get(sub).is_some(), "run manifest lacks {sub}");
    }

    // new roads with exactly two days plus one window of history
    let fresh = dir.path().join("fresh");
    ok(&["synth", "--sensors", "4", "--days", "4", "--seed", "77", "--out", s(&fresh)]);
    let text = std::fs::read_to_string(fresh.join("signals.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().replace(",s", ",new");
    let body: Vec<&str> = lines.take(MIN_HISTORY).collect();
    let signals = dir.path().join("new_signals.csv");
    std::fs::write(&signals, format!("{header}\n{}\n", body.join("\n"))).unwrap();
    let out = dir.path().join("forecast.csv");
    let cfg = dir.path().join("config.json");
    ok(&["forecast", "--config", s(&cfg), "--signals", s(&signals), "--out", s(&out)]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "road_id,horizon,timestamp,speed");
    assert_eq!(rows.len(), 1 + 4 * 12);
    assert!(rows[1].starts_with("new000,1,"));
    assert!(rows[1..].iter().all(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap().is_finite()));

    let short = dir.path().join("short.csv");
    std::fs::write(&short, format!("{header}\n{}\n", body[..MIN_HISTORY - 1].join("\n"))).unwrap();
    assert_eq!(scpt(&["forecast", "--config", s(&cfg), "--signals", s(&short)]).status.code(), Some(1));
}

#[test]
fn identical_runs_report_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (full_run(a.path()), full_run(b.path()));
    let metrics = |r: &EvalReport| {
        let mut v = serde_json::to_value(r).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(metrics(&ra), metrics(&rb));
}

#[test]
fn seed_grid_writes_a_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&["synth", "--config", s(&cfg)]);
    let out = dir.path().join("grid.csv");
    ok(&["seed-grid", "--config", s(&cfg), "--model-seeds", "0,1", "--split-seeds", "2", "--out", s(&out)]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "model_seed\\split_seed,2,row_std");
    assert!(rows[1].starts_with("0,") && rows[2].starts_with("1,"));
    let col_std: f64 = rows[3].split(',').nth(1).unwrap().parse().unwrap();
    assert!(col_std.is_finite());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(scpt(&["--help"]).status.code(), Some(0));
    assert_eq!(scpt(&["teleport"]).status.code(), Some(1));
    assert_eq!(scpt(&["split", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(scpt(&["train", "--sga", "maybe"]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 1, "learning_rat": 0.1}}"#).unwrap();
    let out = scpt(&["split", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let sga_mismatch = dir.path().join("mismatch.json");
    std::fs::write(&sga_mismatch, r#"{"pretrain": {"dim": 8}}"#).unwrap();
    assert_eq!(scpt(&["train", "--config", s(&sga_mismatch)]).status.code(), Some(1));

    let missing = dir.path().join("nowhere");
    assert_eq!(scpt(&["split", "--data", s(&missing)]).status.code(), Some(2));
    assert_eq!(scpt(&["split", "--config", s(&missing.join("c.json"))]).status.code(), Some(2));
}
