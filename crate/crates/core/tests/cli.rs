use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mixshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixshare"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn tiny_config(dir: &Path, extra: Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "seed": 5,
        "num_classes": 3,
        "synthetic_n_per_class": 6,
        "synthetic_noise_std": 0.3,
        "batch_size": 4,
        "epochs": 2,
        "eval_batch_size": 16,
        "output_dir": dir.join("run"),
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(mixshare(&[]).status.code(), Some(1));
    assert_eq!(mixshare(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mixshare(&["train"]).status.code(), Some(1));
    assert_eq!(mixshare(&["gradcheck", "--config", "x", "--batch", "1"]).status.code(), Some(1));
    let help = mixshare(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-data"));
}

#[test]
fn invalid_config_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        json!({ "m": 3, "depth": 11, "val_fraction": 1.5, "batch_size": 0 }),
    );
    let out = mixshare(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["m = 2", "depth", "val_fraction", "batch"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
    assert!(!dir.path().join("run").exists());

    std::fs::write(dir.path().join("typo.json"), r#"{"epohcs": 3}"#).unwrap();
    let out = mixshare(&["train", "--config", dir.path().join("typo.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    assert_eq!(mixshare(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn gradcheck_passes_on_shipped_config() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let out = mixshare(&["gradcheck", "--config", cfg.to_str().unwrap(), "--samples", "16"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["pass"], true);
}

#[test]
fn gen_data_then_train_on_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synthetic.bin");
    let out = mixshare(&[
        "gen-data", "--output", data.to_str().unwrap(), "--classes", "3", "--n-per-class", "5", "--noise-std", "0.2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::metadata(&data).unwrap().len(), 15 * 3073);
    assert_eq!(
        mixshare(&["gen-data", "--output", data.to_str().unwrap(), "--classes", "11", "--layout", "cifar10"])
            .status
            .code(),
        Some(2)
    );

    let cfg = tiny_config(dir.path(), json!({ "dataset": "cifar10", "data_path": data, "epochs": 1 }));
    let out = mixshare(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["normalization"]["mean"][0], 0.4914);

    std::fs::write(&data, b"").unwrap();
    let out = mixshare(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "unmix": "fadeout", "fadeout_end_epoch": 2, "init": "colinear" }));
    let out = mixshare(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["model.ckpt", "config.json", "metrics.csv", "sharing_report.json", "eval.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let trained = stdout_json(&out);
    assert_eq!(trained["config"]["seed"], 5);

    let ckpt = run.join("model.ckpt");
    let out = mixshare(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let eval = stdout_json(&out);
    assert_eq!(eval, trained["final"]);

    let report = dir.path().join("analysis/report.json");
    std::fs::create_dir_all(report.parent().unwrap()).unwrap();
    let out = mixshare(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--output",
        report.to_str().unwrap(),
        "--variance",
        "--variance-samples",
        "5",
        "--dump-masks",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["variance_pearson"].as_array().unwrap().len(), 3);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["variance_importance"].as_array().unwrap().len(), 3);
    assert_eq!(doc["share_rate_classifier"], trained["share_rate_classifier"]);
    let analysis = dir.path().join("analysis");
    assert!(analysis.join("report_classifier_hist.csv").exists());
    let index = std::fs::read_to_string(analysis.join("masks/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 4 + 1);

    let bogus = dir.path().join("nope.ckpt");
    std::fs::write(&bogus, b"NOPE").unwrap();
    let out = mixshare(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn identical_runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "unmix": "full", "init": "identical" }));
    let read = |sub: &str, f: &str| std::fs::read(dir.path().join(sub).join(f)).unwrap();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = mixshare(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(read("a", "model.ckpt"), read("b", "model.ckpt"));
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));

    let out_dir = dir.path().join("c");
    let out = mixshare(&[
        "train", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap(), "--seed", "6",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(read("a", "model.ckpt"), read("c", "model.ckpt"));
}
