use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ldam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldam"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LDAM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "seed": 11,
        "output_dir": "run",
        "dataset": {"source": "synthetic", "counts": [300, 30], "dim": 4, "separation": 2.5, "val_per_class": 100},
        "schedule": {"epochs": 6, "stage_boundary": 4, "decay_epochs": [4], "warmup_epochs": 1, "batch_size": 32}
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn generate_writes_manifest_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 5,
        "dataset": {"source": "synthetic", "imbalance": {"kind": "long_tailed", "n_max": 1000, "k": 4, "rho": 100.0},
                    "dim": 3, "separation": 2.0, "val_per_class": 10}
    });
    fs::write(tmp.path().join("c.json"), cfg.to_string()).unwrap();
    for dir in ["a", "b"] {
        ok(ldam(&["generate", "-c", "c.json", "--output-dir", dir], tmp.path()));
    }
    let manifest = read_json(tmp.path().join("a/counts.json"));
    assert_eq!(manifest["train_counts"], json!([1000, 215, 46, 10]));
    assert!((manifest["imbalance_ratio"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(manifest["val_counts"], json!([10, 10, 10, 10]));
    for f in ["train.csv", "val.csv", "counts.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }

    ok(ldam(
        &["generate", "-c", "c.json", "--output-dir", "flat", "--set", "dataset.imbalance.rho=1.0"],
        tmp.path(),
    ));
    let flat = read_json(tmp.path().join("flat/counts.json"));
    assert_eq!(flat["train_counts"], json!([1000, 1000, 1000, 1000]));
    assert_eq!(flat["imbalance_ratio"], json!(1.0));
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    ok(ldam(&["train", "-c", "config.json"], tmp.path()));
    let run = tmp.path().join("run");
    for f in ["checkpoint.json", "log.jsonl", "log.csv", "summary.json", "eval.json", "per_class.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let summary = read_json(run.join("summary.json"));
    assert_eq!(summary["config"]["schedule"]["stage_boundary"], json!(4));
    assert_eq!(summary["config"]["model"]["scale"], json!(30.0));
    assert_eq!(summary["epochs"], json!(6));

    ok(ldam(&["train", "-c", "config.json", "--output-dir", "again"], tmp.path()));
    for f in ["checkpoint.json", "log.jsonl", "eval.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(tmp.path().join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_ldam"))
        .args(["train", "-c", "config.json", "--epochs", "2", "--set", "schedule.stage_boundary=1"])
        .current_dir(tmp.path())
        .env("LDAM_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    ok(o);
    assert!(tmp.path().join("root/run/summary.json").exists());
}

#[test]
fn evaluate_matches_final_log_entry() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    ok(ldam(&["generate", "-c", "config.json", "--output-dir", "data"], tmp.path()));
    let cfg = json!({
        "seed": 11,
        "output_dir": "csvrun",
        "dataset": {"source": "csv", "train": "data/train.csv", "val": "data/val.csv"},
        "schedule": {"epochs": 6, "stage_boundary": 4, "decay_epochs": [4], "warmup_epochs": 1, "batch_size": 32}
    });
    fs::write(tmp.path().join("csv.json"), cfg.to_string()).unwrap();
    ok(ldam(&["train", "-c", "csv.json"], tmp.path()));
    let out = ok(ldam(
        &["evaluate", "--checkpoint", "csvrun/checkpoint.json", "--data", "data/val.csv"],
        tmp.path(),
    ));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let written = read_json(tmp.path().join("csvrun/eval-val.json"));
    assert_eq!(printed, written);
    let last: Value = serde_json::from_str(
        fs::read_to_string(tmp.path().join("csvrun/log.jsonl")).unwrap().lines().last().unwrap(),
    )
    .unwrap();
    let a = printed["balanced_error"].as_f64().unwrap();
    let b = last["balanced_val_error"].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
}

#[test]
fn evaluate_separable_train_set_is_near_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 2,
        "output_dir": "sep",
        "dataset": {"source": "synthetic", "counts": [200, 50], "dim": 2, "separation": 12.0, "val_per_class": 50},
        "schedule": {"epochs": 10, "decay_epochs": [8], "warmup_epochs": 1, "batch_size": 32}
    });
    fs::write(tmp.path().join("sep.json"), cfg.to_string()).unwrap();
    ok(ldam(&["generate", "-c", "sep.json"], tmp.path()));
    ok(ldam(&["train", "-c", "sep.json"], tmp.path()));
    let out = ok(ldam(
        &["evaluate", "--checkpoint", "sep/checkpoint.json", "--data", "sep/train.csv", "--out", "train-eval.json"],
        tmp.path(),
    ));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["overall_error"].as_f64().unwrap() <= 0.01, "{report}");
    assert!(tmp.path().join("train-eval.json").exists());
}

#[test]
fn evaluate_reports_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    ok(ldam(&["train", "-c", "config.json", "--epochs", "2", "--set", "schedule.stage_boundary=1"], tmp.path()));

    fs::write(tmp.path().join("narrow.csv"), "1.0,2.0,0\n3.0,4.0,1\n").unwrap();
    let o = ldam(&["evaluate", "--checkpoint", "run/checkpoint.json", "--data", "narrow.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("expected 4") && msg.contains("found 2"), "{msg}");

    fs::write(tmp.path().join("bad.json"), "{\"format\": \"ldam-checkpoint/1\", \"model\": ").unwrap();
    let o = ldam(&["evaluate", "--checkpoint", "bad.json", "--data", "narrow.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json"), "{}", stderr(&o));
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let o = ldam(&["train", "-c", "config.json", "--set", "schedule.stage_boundary=99"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = ldam(&["train", "-c", "config.json", "--set", "loss.kind=nonsense"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = ldam(&["train", "-c", "missing.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = ldam(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));

    let cfg = json!({"dataset": {"source": "csv", "train": "nope.csv", "val": "nope.csv"}});
    fs::write(tmp.path().join("csv.json"), cfg.to_string()).unwrap();
    let o = ldam(&["train", "-c", "csv.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.csv"));
}

#[test]
fn theory_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let doc: Value = serde_json::from_slice(&ok(ldam(&["theory", "--counts", "16,1"], tmp.path())).stdout).unwrap();
    assert_eq!(doc["ldam_margins"], json!([0.25, 0.5]));

    let doc: Value = serde_json::from_slice(&ok(ldam(&["theory", "--counts", "100,100"], tmp.path())).stdout).unwrap();
    assert_eq!(doc["ldam_margins"], json!([0.5, 0.5]));
    assert_eq!(doc["optimal_binary_margins"]["gamma1"], json!(0.5));

    let doc: Value =
        serde_json::from_slice(&ok(ldam(&["theory", "--counts", "10000,100", "--test-counts", "100,10000"], tmp.path())).stdout)
            .unwrap();
    let g1 = doc["optimal_binary_margins"]["gamma1"].as_f64().unwrap();
    assert!((g1 - 0.240253).abs() < 1e-6);
    let ta: Vec<f64> = serde_json::from_value(doc["test_aware_margins"].clone()).unwrap();
    assert!((ta[1] - 0.5).abs() < 1e-12 && (ta[0] - 0.05).abs() < 1e-12, "{ta:?}");
    let b = &doc["balanced_bound"];
    assert!(b["optimal_profile"].as_f64().unwrap() < b["uniform_same_total"].as_f64().unwrap());

    let doc: Value = serde_json::from_slice(&ok(ldam(&["theory", "--counts", "9,4,1"], tmp.path())).stdout).unwrap();
    assert!(doc.get("optimal_binary_margins").is_none());
    assert!(doc["notes"].is_array());

    let o = ldam(&["theory", "--counts", "5,0"], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn sweep_grid_rows_and_failed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let args = [
        "sweep", "-c", "config.json", "--jobs", "2",
        "--axis", "loss.kind=erm_ce,ldam_ce",
        "--axis", "rebalance.mode=never,deferred",
        "--out", "grid.csv",
    ];
    ok(ldam(&args, tmp.path()));
    let first = fs::read_to_string(tmp.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("cell,loss.kind,rebalance.mode,status,final_balanced_error"));
    assert!(lines[1].starts_with("0,erm_ce,never,ok,"));
    assert!(lines[4].starts_with("3,ldam_ce,deferred,ok,"));
    ok(ldam(&args, tmp.path()));
    assert_eq!(first, fs::read_to_string(tmp.path().join("grid.csv")).unwrap());

    ok(ldam(
        &["sweep", "-c", "config.json", "--axis", "schedule.stage_boundary=2,50", "--out", "bad.csv"],
        tmp.path(),
    ));
    let text = fs::read_to_string(tmp.path().join("bad.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[1].contains(",2,ok,"));
    assert!(rows[2].contains(",50,failed,"), "{}", rows[2]);
}

#[test]
fn benchmark_sweep_ranks_ldam_drw_first() {
    let tmp = tempfile::tempdir().unwrap();
    ok(ldam(
        &[
            "sweep",
            "--axis", "loss.kind=erm_ce,ldam_ce",
            "--axis", "rebalance.mode=never,deferred",
            "--out", "bench.csv",
        ],
        tmp.path(),
    ));
    let text = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    let errors: Vec<(String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (format!("{}+{}", f[1], f[2]), f[4].parse().unwrap())
        })
        .collect();
    let best = errors.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(best.0, "ldam_ce+deferred", "{errors:?}");
}
