//! End-to-end CLI tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparseloco"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sloco_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.txt");
    let text = sparseloco::hetero::data::synthetic_corpus(5, 400_000);
    std::fs::write(&path, text).unwrap();
    path
}

fn tiny_config(dir: &Path, preset: &str, rounds: usize) -> PathBuf {
    let corpus = write_corpus(dir);
    let out = dir.join("out");
    let config = format!(
        r#"
[model]
d_model = 32
n_layers = 2
n_heads = 2
seq_len = 32
precision = "f32"

[outer]
h = 3
rounds = {rounds}
replicas = 4

[inner]
lr_peak = 1e-3
warmup_steps = 5
total_steps = {total}

[cluster]
preset = "{preset}"
stages = 2
k_over_d = 0.125

[train]
corpus = "{corpus}"
batch_size = 4

[output]
dir = "{out}"
"#,
        total = rounds * 3,
        corpus = corpus.display(),
        out = out.display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn train_smoke_produces_artifacts_and_learns() {
    let dir = temp_dir("train");
    let config = tiny_config(&dir, "baseline", 10);
    let status = bin().args(["train", "--config"]).arg(&config).status().unwrap();
    assert!(status.success());
    let out = dir.join("out");
    for file in ["report.json", "metrics.csv", "metrics.jsonl", "config_echo.toml"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    assert!(out.join("checkpoint/checkpoint.bin").exists());
    assert!(out.join("checkpoint/manifest.json").exists());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let initial = report["initial_eval_loss"].as_f64().unwrap();
    let final_loss = report["final_eval_loss"].as_f64().unwrap();
    assert!(final_loss.is_finite() && final_loss < initial);
    assert!(report["version"].is_string());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = temp_dir("rerun");
    let config = tiny_config(&dir, "het_half", 2);
    assert!(bin().args(["train", "--config"]).arg(&config).status().unwrap().success());
    let first = std::fs::read(dir.join("out/metrics.csv")).unwrap();
    assert!(bin().args(["train", "--config"]).arg(&config).status().unwrap().success());
    let second = std::fs::read(dir.join("out/metrics.csv")).unwrap();
    assert_eq!(first, second);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn het_half_rejects_odd_replica_count() {
    let dir = temp_dir("oddm");
    let config = tiny_config(&dir, "het_half", 1);
    let text = std::fs::read_to_string(&config).unwrap().replace("replicas = 4", "replicas = 3");
    std::fs::write(&config, text).unwrap();
    let output = bin().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("even"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_config_key_rejected() {
    let dir = temp_dir("unknown");
    let config = tiny_config(&dir, "baseline", 1);
    let text = std::fs::read_to_string(&config).unwrap() + "\n[train2]\nx = 1\n";
    std::fs::write(&config, text).unwrap();
    let output = bin().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_corpus_exits_with_corpus_code() {
    let dir = temp_dir("nocorpus");
    let config = tiny_config(&dir, "baseline", 1);
    std::fs::remove_file(dir.join("corpus.txt")).unwrap();
    let output = bin().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn perf_writes_sweep_with_97_percent_row() {
    let dir = temp_dir("perf");
    let out = dir.join("perf_out");
    let config = dir.join("perf.toml");
    std::fs::write(
        &config,
        format!("[output]\ndir = \"{}\"\n", out.display()),
    )
    .unwrap();
    let status = bin().args(["perf", "--config"]).arg(&config).status().unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut header = csv.lines();
    assert_eq!(header.next().unwrap(), "bandwidth_bps,k_over_d,utilization,wallclock_s");
    // Default 70B scenario: at 1 Gb/s and k/d = 1/8 utilization >= 0.97.
    let row = csv
        .lines()
        .filter(|l| l.starts_with("1.0") && l.contains(",0.12500000,"))
        .find(|l| l.starts_with("1.000000e9"))
        .expect("1 Gb/s x 1/8 row present");
    let utilization: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!(utilization >= 0.97, "{row}");
    assert!(out.join("wallclock_1gbps.json").exists());
    assert!(out.join("scenario.json").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn perf_empty_grid_is_usage_error() {
    let dir = temp_dir("badgrid");
    let config = dir.join("perf.toml");
    std::fs::write(&config, "[perf]\nratios = []\n").unwrap();
    let output = bin().args(["perf", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(5));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn verify_filter_runs_named_subset() {
    let output = bin()
        .args(["verify", "--filter", "golden_wire_formats"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("PASS golden_wire_formats"));
    assert!(stdout.contains("1 checks, 0 failures"));

    let bad = bin().args(["verify", "--filter", "no_such_check"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(5));
}
