use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

const SHORT: [&str; 6] = [
    "--set",
    "epochs_stage1=3",
    "--set",
    "epochs_stage2=3",
    "--set",
    "epochs_stage3=2",
];

fn face(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_face"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = face(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_short<'a>(args: &[&'a str]) -> Vec<&'a str> {
    SHORT.iter().copied().chain(args.iter().copied()).collect()
}

fn fresh() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["fixture"]);
    ok(dir.path(), &["prepare"]);
    ok(dir.path(), &["embed-summaries"]);
    dir
}

/// A workdir trained through all three stages on a short schedule.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = fresh();
        ok(dir.path(), &with_short(&["train", "--stage", "all"]));
        dir
    })
    .path()
}

#[test]
fn prepare_writes_artifacts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["fixture"]);
    ok(dir.path(), &["prepare"]);
    let first = fs::read(dir.path().join("prepared/interactions.tsv")).unwrap();
    let index = fs::read(dir.path().join("prepared/index.json")).unwrap();
    ok(dir.path(), &["prepare"]);
    assert_eq!(fs::read(dir.path().join("prepared/interactions.tsv")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("prepared/index.json")).unwrap(), index);
}

#[test]
fn missing_interactions_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = face(dir.path(), &["prepare"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("interactions.tsv"));
}

#[test]
fn missing_config_file_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = face(dir.path(), &["--config", "nope.toml", "prepare"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn later_stage_without_its_predecessor_exits_with_three() {
    let dir = fresh();
    let out = face(dir.path(), &["train", "--stage", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 2 must complete"));
    assert_eq!(face(dir.path(), &["descriptors"]).status.code(), Some(3));
}

#[test]
fn bad_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(face(dir.path(), &["train", "--stage", "4"]).status.code(), Some(1));
    assert_eq!(face(dir.path(), &["--set", "nope=1", "prepare"]).status.code(), Some(1));
}

#[test]
fn flags_win_over_the_config_file_and_are_logged() {
    let dir = fresh();
    let config = dir.path().join("config.toml");
    let body = fs::read_to_string(&config).unwrap().replace("mu = 1.0", "mu = 0.5");
    fs::write(&config, body).unwrap();
    let out = ok(dir.path(), &with_short(&["train", "--stage", "1"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu = 0.5"));
    let out = ok(dir.path(), &with_short(&["--seed", "2024", "train", "--stage", "2", "--mu", "0"]));
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("mu = 0.0"), "{log}");
    assert!(log.contains("resolved config (seed 2024)"));
    assert!(log.contains("normalize_anchors = true"));
    let out = ok(dir.path(), &["--no-normalize-anchors", "eval"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalize_anchors = false"));
}

#[test]
fn full_training_writes_metrics_and_logs() {
    let dir = trained();
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["checkpoint"], "checkpoints/stage3/final");
    let log = fs::read_to_string(dir.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
}

#[test]
fn eval_reports_the_requested_cutoffs() {
    let out = ok(trained(), &["eval", "--topk", "5,20"]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["recall@5", "recall@20", "ndcg@5", "ndcg@20"] {
        assert!(metrics[key].is_f64(), "{key}");
    }
}

#[test]
fn descriptor_export_has_one_line_per_item_and_is_repeatable() {
    let dir = trained();
    ok(dir, &["descriptors", "--kind", "item", "--out", "items.jsonl"]);
    let body = fs::read_to_string(dir.join("items.jsonl")).unwrap();
    assert_eq!(body.lines().count(), 100);
    for line in body.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["tokens"].as_array().unwrap().len(), 4);
    }
    ok(dir, &["descriptors", "--kind", "item", "--out", "items.jsonl"]);
    assert_eq!(fs::read_to_string(dir.join("items.jsonl")).unwrap(), body);
    ok(dir, &["descriptors", "--kind", "user", "--out", "users.jsonl"]);
    assert_eq!(fs::read_to_string(dir.join("users.jsonl")).unwrap().lines().count(), 200);
}

#[test]
fn generate_prints_a_cf_vector_or_suggests_tokens() {
    let dir = trained();
    ok(dir, &["descriptors", "--out", "gen.jsonl"]);
    let first = fs::read_to_string(dir.join("gen.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let tokens: Vec<&str> = line["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    let out = ok(dir, &["generate", "--tokens", &tokens.join(",")]);
    let v: Vec<f64> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.len(), 32);

    let out = face(dir, &["generate", "--tokens", &format!("zzzzqq,{}", tokens[1..].join(","))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nearest vocabulary matches"));
}

#[test]
fn retrieval_probe_reports_accuracy_against_chance() {
    let out = ok(trained(), &["retrieval-probe", "--candidates", "10", "--trials", "200"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["trials"], 200);
    assert_eq!(r["chance"], 0.1);
    assert!(r["accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn anchors_are_byte_identical_across_reruns() {
    let dir = fresh();
    let first = fs::read(dir.path().join("anchors.bin")).unwrap();
    ok(dir.path(), &["embed-summaries"]);
    assert_eq!(fs::read(dir.path().join("anchors.bin")).unwrap(), first);
}
