use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 5,
  "synth": {"n_users": 80, "months": 4, "bbox": {"lat_min": 35.6, "lat_max": 35.62, "lon_min": 139.6, "lon_max": 139.62}},
  "tokenizer": {"vocab_size": 300},
  "masking": {"chunk_size": 64},
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_len": 64},
  "pretrain": {"epochs": 1, "batch_size": 16},
  "finetune": {"epochs": 1, "batch_size": 16},
  "tasks": {"n_examples": 40}
}"#;

fn ltm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn show_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltm(dir.path(), &["show-config", "--seed", "9"]);
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["masking"]["chunk_size"], 512);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"sede": 1}"#).unwrap();
    let out = ltm(dir.path(), &["--config", "bad.json", "show-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).1.contains("sede"));
}

#[test]
fn missing_upstream_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let out = ltm(dir.path(), &["--config", "tiny.json", "--out", "r", "train-tokenizer"]);
    assert_eq!(out.status.code(), Some(2));
    let (_, err) = text(&out);
    assert!(err.contains("corpus"), "{err}");
}

#[test]
fn held_lock_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("r")).unwrap();
    fs::write(dir.path().join("r/.lock"), "1").unwrap();
    let out = ltm(dir.path(), &["--out", "r", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_run_then_report_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let base = ["--config", "tiny.json", "--out", "r"];
    for stage in ["synth", "ingest", "build-corpus", "train-tokenizer"] {
        let out = ltm(dir.path(), &[&base[..], &[stage]].concat());
        let (stdout, stderr) = text(&out);
        assert!(out.status.success(), "{stage}: {stderr}");
        assert_eq!(stdout.trim(), format!("{stage}: done"));
    }
    let out = ltm(dir.path(), &[&base[..], &["train-tokenizer"]].concat());
    assert_eq!(text(&out).0.trim(), "train-tokenizer: up to date");
    assert!(dir.path().join("r/tokenizer/vocab.txt").is_file());
    assert!(!dir.path().join("r/.lock").exists());

    // a tokenizer override makes the stored vocabulary stale downstream
    let out = ltm(dir.path(), &[&base[..], &["train-tokenizer", "--vocab-size", "250"]].concat());
    assert!(out.status.success());
    let out = ltm(dir.path(), &[&base[..], &["build-pretrain-data"]].concat());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out).1);
}
