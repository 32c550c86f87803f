//! End-to-end runs of the `robust-slu` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-slu"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ROBUST_SLU_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"train = "train.jsonl"
test = "test.jsonl"
buckets = "google"
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_len = 16
pretrain_steps = 15
pretrain_batch = 16
finetune_epochs = 2
finetune_batch = 32
"#;

#[test]
fn pretrain_finetune_evaluate_from_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(&["gen-toy", "--output", "train.jsonl", "--n", "300", "--seed", "3"], d);
    ok(&["gen-toy", "--output", "test.jsonl", "--n", "120", "--seed", "4", "--id-prefix", "test"], d);

    ok(&["pretrain", "--config", "run.toml", "--out", "pt"], d);
    for f in ["config.toml", "pretrain_log.jsonl", "vocab.tsv", "pretrain.ckpt.json"] {
        assert!(d.join("pt").join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(d.join("pt/pretrain_log.jsonl")).unwrap().lines().count(), 15);

    ok(&["finetune", "--config", "run.toml", "--init", "pt/pretrain.ckpt.json", "--out", "ft"], d);
    let log = fs::read_to_string(d.join("ft/finetune_log.jsonl")).unwrap();
    assert!(!log.is_empty());

    let table = ok(&["evaluate", "--config", "run.toml", "--model", "ft/model.ckpt.json", "--out", "ev"], d);
    assert!(table.contains("clean"));
    let csv = fs::read_to_string(d.join("ev/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bucket,n,accuracy,joint_accuracy");
    assert_eq!(lines.len(), 6);
    let total: usize = lines[1..5].iter().map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 120);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    let acc = report["overall"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn wer_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.txt"), "turn on the light\nplay music\n").unwrap();
    assert_eq!(ok(&["wer", "--ref", "a.txt", "--hyp", "a.txt"], d).trim(), "0.0");
    fs::write(d.join("b.txt"), "turn off the light\nplay music\n").unwrap();
    assert_eq!(ok(&["wer", "--ref", "a.txt", "--hyp", "b.txt"], d).trim(), "0.16666666666666666");
    assert_eq!(ok(&["wer", "--ref", "a.txt", "--hyp", "b.txt", "--per-line"], d), "0.25\n0.0\n");
}

#[test]
fn synth_at_zero_target_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = "Turn ON the  light\nplay some   music\n\nset an alarm\n";
    fs::write(d.join("in.txt"), text).unwrap();
    ok(&["synth", "--input", "in.txt", "--output", "out.txt", "--target-wer", "0"], d);
    assert_eq!(fs::read_to_string(d.join("out.txt")).unwrap(), text);

    ok(&["synth", "--input", "in.txt", "--output", "noisy.txt", "--target-wer", "0.5", "--seed", "3"], d);
    assert_ne!(fs::read_to_string(d.join("noisy.txt")).unwrap(), text);
}

#[test]
fn synth_rewrites_jsonl_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-toy", "--output", "clean.jsonl", "--n", "50", "--target-wer", "0"], d);
    ok(&["synth", "--input", "clean.jsonl", "--output", "noisy.jsonl", "--target-wer", "0.3"], d);
    let text = fs::read_to_string(d.join("noisy.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().any(|r| r["wer"].as_f64().unwrap() > 0.0));
    assert!(rows.iter().all(|r| r["scenario"].is_string() && r["action"].is_string()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(run(&["wer", "--ref", "missing.txt", "--hyp", "missing.txt"], d).status.code(), Some(1));
    let out = run(&["ablate", "--name", "no_such_thing", "--train", "x", "--test", "y"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown ablation"));
}
