use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sortlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sortlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sortlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn gen_small(dir: &Path) -> PathBuf {
    ok(&[
        "gen", "--method", "uniform", "--list-len", "5", "--vocab", "20", "--count", "600", "--seed", "1",
        "--validation", "100", "--validation-seed", "2", "--out", s(dir), "--name", "small",
    ]);
    dir.join("small.jsonl")
}

#[test]
fn exit_codes() {
    assert_eq!(sortlab(&["--help"]).status.code(), Some(0));
    assert_eq!(sortlab(&[]).status.code(), Some(1));
    assert_eq!(sortlab(&["gen", "--method", "bogus", "--out", "x"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert_eq!(sortlab(&["train", "--dataset", s(&missing)]).status.code(), Some(1));
    // Valid arguments, impossible request: a target gap above the base mean.
    let base = gen_small(dir.path());
    let out = sortlab(&[
        "gen", "--method", "distilled", "--base", s(&base), "--target-delta", "50", "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_writes_dataset_manifest_and_run_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let m = read_json(&dir.path().join("small.manifest.json"));
    assert_eq!(m["count"], 600);
    assert_eq!(m["generator"], "uniform");
    assert_eq!(m["listLength"], 5);
    assert!(dir.path().join("small_val.jsonl").exists());
    let lines = fs::read_to_string(dir.path().join("small.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 600);
    let rm = read_json(&dir.path().join("run_manifest.json"));
    assert_eq!(rm["command"][1], "gen");
    assert!(rm["durationSecs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(r#"{{"totalSteps": 7, "batchSize": 32, "seed": 3, "dataset": "{}"}}"#, s(&data)),
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--steps", "4", "--out", s(&run)]);
    let written = read_json(&run.join("run.json"));
    assert_eq!(written["totalSteps"], 4);
    assert_eq!(written["batchSize"], 32);
    assert_eq!(written["seed"], 3);
    assert_eq!(written["model"]["vocabSize"], 20);
    assert_eq!(written["model"]["listLength"], 5);
}

#[test]
fn train_analyze_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let val = dir.path().join("small_val.jsonl");
    let run = dir.path().join("run");
    ok(&[
        "train", "--dataset", s(&data), "--eval", s(&val), "--steps", "40", "--batch-size", "64",
        "--checkpoints", "5", "--out", s(&run),
    ]);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,train_loss,eval_loss_small_val,accuracy,circuit_rank,llc"));

    let before = snapshot(&run.join("checkpoints"));
    ok(&["analyze", "--run", s(&run), "--checkpoint", "all", "--limit", "200"]);
    assert_eq!(before, snapshot(&run.join("checkpoints")), "analysis touched checkpoints");
    let last = run.join("analysis/step_40");
    for f in ["circuits.json", "specialization.json", "regions.json", "ablation.csv"] {
        assert!(last.join(f).exists(), "{f}");
    }
    let abl = fs::read_to_string(last.join("ablation.csv")).unwrap();
    assert_eq!(abl.lines().count(), 4);
    assert_eq!(
        sortlab(&["analyze", "--run", s(&run), "--checkpoint", "13"]).status.code(),
        Some(1)
    );

    let out = dir.path().join("export");
    ok(&["export", "--run", s(&run), "--checkpoint", "last", "--out", s(&out)]);
    assert!(out.join("step_40/ov_head0.csv").exists());
    assert!(out.join("step_40/qk_head1.csv").exists());
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn untrained_baseline_circuit_rank_is_full() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--method", "uniform", "--count", "600", "--seed", "1", "--out", s(dir.path()), "--name", "d"]);
    let run = dir.path().join("run");
    ok(&["train", "--dataset", s(&dir.path().join("d.jsonl")), "--steps", "0", "--out", s(&run)]);
    ok(&["analyze", "--run", s(&run), "--checkpoint", "0", "--circuits-only"]);
    let c = read_json(&run.join("analysis/step_0/circuits.json"));
    assert_eq!(c["total_rank"], 192);
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--dataset", s(&data), "--steps", "10", "--batch-size", "32", "--out", s(&run)]);
    ok(&["resume", "--run", s(&run), "--steps", "5"]);
    let cks: Vec<String> = fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(cks.contains(&"step_15".to_string()), "{cks:?}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().last().unwrap().starts_with("15,"));
}

#[test]
fn llc_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--dataset", s(&data), "--steps", "30", "--batch-size", "64", "--out", s(&run)]);
    ok(&[
        "llc", "--run", s(&run), "--n", "64", "--chains", "2", "--draws", "20", "--burn-in", "5", "--seed", "1",
    ]);
    let csv = fs::read_to_string(run.join("llc.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}
