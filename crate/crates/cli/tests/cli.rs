use std::path::Path;
use std::process::{Command, Output};

fn haptiq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haptiq"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = haptiq(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn gen_data_counts() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--scenario", "stirrer", "--success", "25", "--fail", "25", "--seed", "7"]);
    let text = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 50);
    assert_eq!(text.matches("\"success\":true").count(), 25);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(haptiq(dir.path(), &["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(haptiq(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(haptiq(dir.path(), &["train-elbo", "--data", "missing.jsonl"]).status.code(), Some(2));
    assert_eq!(haptiq(dir.path(), &["eval-task"]).status.code(), Some(2));
    assert_eq!(haptiq(dir.path(), &["gen-data", "--config", "nope.toml"]).status.code(), Some(2));
    let out = haptiq(dir.path(), &["export-embeddings"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.jsonl"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\ncolour = 3\n").unwrap();
    assert_eq!(haptiq(dir.path(), &["gen-data", "--config", "bad.toml"]).status.code(), Some(1));
    std::fs::write(dir.path().join("dataset.jsonl"), "{\"id\": 1}\n").unwrap();
    let out = haptiq(dir.path(), &["train-elbo", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert_eq!(haptiq(dir.path(), &["gen-data", "--scenario", "tuba"]).status.code(), Some(1));
}

#[test]
fn config_file_supplies_scenario_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = haptiq_core::detentsim::KnobConfig::preset("fan").unwrap();
    scenario.name = "custom-fan".into();
    let config = format!(
        "[model]\nepochs = 2\nlatent_dim = 3\nhidden = 6\n\n[q]\niterations = 2\n\n[eval]\nhorizons = [1, 2]\nepisodes = 7\n\n[scenario]\n{}",
        scenario.to_toml()
    );
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let c = ["--config", "run.toml"];
    ok(dir.path(), &[&["gen-data", "--success", "2", "--fail", "2"][..], &c].concat());
    let text = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert!(text.starts_with("{\"id\":\"custom-fan-0000\""));
    ok(dir.path(), &[&["train-elbo", "--report", "train.csv"][..], &c].concat());
    let train = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 3);
    assert!(train.lines().nth(1).unwrap().ends_with(','));
    ok(dir.path(), &[&["train-q", "--report", "q.csv"][..], &c].concat());
    assert_eq!(std::fs::read_to_string(dir.path().join("q.csv")).unwrap().lines().count(), 3);
    ok(dir.path(), &[&["eval-pred"][..], &c].concat());
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap().lines().count(), 3);
    let out = ok(dir.path(), &[&["eval-task", "--out", "task.csv"][..], &c].concat());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("custom-fan:"));
    assert_eq!(std::fs::read_to_string(dir.path().join("task.csv")).unwrap().lines().count(), 8);
    ok(dir.path(), &[&["export-embeddings"][..], &c].concat());
    let emb = std::fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
    assert!(emb.starts_with("sequence,step,phase,reward,success,z0,z1,z2\n"));
}

#[test]
fn timing_fills_seconds_and_oracle_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--success", "2", "--fail", "1", "--out", "runs/a/dataset.jsonl"]);
    ok(
        dir.path(),
        &[
            "train-elbo", "--data", "runs/a/dataset.jsonl", "--model", "window", "--epochs", "1", "--timing",
            "--report", "runs/a/train.csv", "--out", "runs/a/model.ckpt",
        ],
    );
    let train = std::fs::read_to_string(dir.path().join("runs/a/train.csv")).unwrap();
    assert!(!train.lines().nth(1).unwrap().ends_with(','));
    let out = ok(dir.path(), &["eval-task", "--policy", "oracle", "--scenario", "speaker", "--episodes", "20"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("success 20/20"));
}
