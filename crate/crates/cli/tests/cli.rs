use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use betagate::data::{synthetic, write_idx_images, write_idx_labels};

fn betagate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betagate"))
        .args(args)
        .env_remove("BETAGATE_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn tiny_train(out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--hidden", "6", "--out", out];
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "2"]);
    }
    args.extend_from_slice(extra);
    betagate(&args)
}

#[test]
fn train_then_eval_twice_in_mean_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let t = tiny_train(out, &["--variant", "bblstm3g"]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&t.stdout).unwrap();
    assert_eq!(summary["history"].as_array().unwrap().len(), 2);
    let a = betagate(&["eval", "--config", &format!("{out}/run.json")]);
    let b = betagate(&["eval", "--config", &format!("{out}/run.json")]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let s = betagate(&["eval", "--config", &format!("{out}/run.json"), "--eval-mode", "sample"]);
    let r: serde_json::Value = serde_json::from_slice(&s.stdout).unwrap();
    assert_eq!(r["values"].as_array().unwrap().len(), 10);
    assert!(r["std"].as_f64().unwrap() >= 0.0);
}

#[test]
fn same_seed_same_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&tiny_train(d.to_str().unwrap(), &["--seed", "9", "--variant", "bblstm5gp"])), 0);
    }
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"variant": "lstm", "hidden": 5, "epochs": 3, "synthetic": {"train": 16, "valid": 8, "test": 8, "length": 5}}"#).unwrap();
    let out = dir.path().join("run");
    let o = betagate(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["epochs"], 1);
    assert_eq!(run["hidden"], 5);
    assert_eq!(run["variant"], "lstm");
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_betagate"))
        .args(["train", "--hidden", "4", "--epochs", "0"])
        .env("BETAGATE_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("best.ckpt").exists());
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&betagate(&["train", "--epochs", "0", "--hidden", "4", "--out", out.to_str().unwrap()])), 0);
    assert!(out.join("best.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&betagate(&["train", "--bogus"])), 1);
    assert_eq!(code(&betagate(&["train", "--variant", "gru"])), 1);
    assert_eq!(code(&betagate(&["train", "--hidden", "0"])), 1);
    assert_eq!(code(&betagate(&["eval", "--eval-mode", "median"])), 1);
    assert_eq!(code(&betagate(&["diagnose", "nothing"])), 1);
    assert_eq!(code(&betagate(&["--help"])), 0);
}

#[test]
fn architecture_mismatch_lists_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&tiny_train(out, &["--epochs", "0"])), 0);
    let o = betagate(&["eval", "--hidden", "7", "--out", out]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("layer0.w") && err.contains("[9, 49]") && err.contains("[8, 42]"), "{err}");
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"task": "music", "data": {"train": "missing.json"}}"#).unwrap();
    let o = betagate(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = betagate(&["eval", "--out", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_three_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"clip_norm": 0.0, "hidden": 6, "epochs": 3, "adam": {"lr": 1e300}}"#).unwrap();
    let out = dir.path().join("run");
    let o = betagate(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("last good checkpoint"));
    assert!(out.join("best.ckpt").exists() && out.join("failure.json").exists());
}

#[test]
fn proposition_gives_three_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = betagate(&["diagnose", "proposition", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reps: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reps.len(), 3);
    assert_eq!(csv_rows(&dir.path().join("proposition.csv")), 3);
}

#[test]
fn histogram_correlation_and_gradflow_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&tiny_train(out, &["--epochs", "1"])), 0);
    let o = betagate(&["diagnose", "histogram", "--hidden", "6", "--out", out, "--bins", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for g in ["i", "f", "o"] {
        assert_eq!(csv_rows(&Path::new(out).join(format!("hist_{g}.csv"))), 20);
    }
    let first = fs::read(Path::new(out).join("hist_i.csv")).unwrap();
    betagate(&["diagnose", "histogram", "--hidden", "6", "--out", out, "--bins", "20"]);
    assert_eq!(first, fs::read(Path::new(out).join("hist_i.csv")).unwrap());

    assert_eq!(code(&betagate(&["diagnose", "correlation", "--hidden", "6", "--out", out])), 0);
    let corr = fs::read(Path::new(out).join("correlation.csv")).unwrap();
    betagate(&["diagnose", "correlation", "--hidden", "6", "--out", out]);
    assert_eq!(corr, fs::read(Path::new(out).join("correlation.csv")).unwrap());
    // default synthetic sequences have 20 steps
    assert_eq!(csv_rows(&Path::new(out).join("correlation.csv")), 20);

    assert_eq!(code(&betagate(&["diagnose", "gradflow", "--hidden", "6", "--out", out])), 0);
    assert_eq!(csv_rows(&Path::new(out).join("gradflow.csv")), 20);

    let o = betagate(&["diagnose", "correlation", "--variant", "lstm", "--hidden", "6", "--out", out]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradflow_over_a_full_pixel_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = synthetic::digit_images(12, 3);
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx_images(&img, 28, 28, &images).unwrap();
    write_idx_labels(&lab, &labels).unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"task": "mnist", "variant": "lstm", "hidden": 4, "batch_size": 4, "epochs": 0,
            "data": {"train_images": "img.idx", "train_labels": "lab.idx"}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&betagate(&["train", "--config", cfg.to_str().unwrap(), "--out", out])), 0);
    let o = betagate(&["diagnose", "gradflow", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(Path::new(out).join("gradflow.csv")).unwrap();
    assert_eq!(text.lines().count() - 1, 784);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap().is_finite()));
}

#[test]
fn check_reports_every_property() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("check.json");
    let o = betagate(&["check", "--report", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let props = r["properties"].as_array().unwrap();
    assert!(props.len() >= 20);
    assert!(props.iter().all(|p| p["passed"] == true && p["measured"].is_number() && p["threshold"].is_number()));
}
