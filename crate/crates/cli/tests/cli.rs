use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn prmseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prmseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn prmseg")
}

fn ok(args: &[&str]) -> String {
    let out = prmseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn write_config(path: &Path, extra: Value) {
    let mut cfg = json!({
        "mode": "psp",
        "model": { "depth": 3, "channels": [4, 8, 8],
                   "kernels": [[1,1,1], [1,3,3], [3,1,3], [3,3,1]], "num_classes": 3 },
        "optimizer": { "kind": "adamw", "lr": 0.001 },
        "batch_size": 2,
        "patch_size": [8, 8, 8],
        "epochs": 4,
        "iterations_per_epoch": 2,
        "calibration_count": 2,
        "monitor_count": 2,
        "initial_p": 1,
        "controller_window": 1,
        "convergence_tolerance": 1.0,
        "seed": 3,
        "precision": "f64",
        "checkpoint_every": 1,
        "eval_every": 2,
        "eval_cases": 1,
        "dataset": "data/manifest.json",
        "output_dir": "run"
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    fs::write(path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

fn epochs_without_seconds(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = ok(&[
        "generate-data",
        "--out",
        data.to_str().unwrap(),
        "--count",
        "6",
        "--dims",
        "16,16,16",
        "--seed",
        "3",
        "--train-fraction",
        "0.67",
    ]);
    assert!(out.contains("6 cases (4 train / 2 test)"), "{out}");

    let cfg = root.join("psp.json");
    write_config(&cfg, json!({}));
    let out = ok(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.starts_with("trained 4 epochs"), "{out}");
    let run = root.join("run");
    for f in [
        "config.json",
        "epochs.csv",
        "controller.csv",
        "events.jsonl",
        "evals.jsonl",
        "timeline.json",
        "architecture_initial.json",
        "summary.json",
        "final/checkpoint.json",
        "final/tensors.bin",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary = read_json(&run.join("summary.json"));
    assert!(
        !summary["events"].as_array().unwrap().is_empty(),
        "loose controller acts"
    );

    // resume from the middle into a fresh directory reproduces the log
    let cfg_b = root.join("resume.json");
    write_config(&cfg_b, json!({ "output_dir": "run_b" }));
    ok(&[
        "train",
        "--config",
        cfg_b.to_str().unwrap(),
        "--resume",
        run.join("checkpoints/epoch_0002").to_str().unwrap(),
    ]);
    assert_eq!(
        epochs_without_seconds(&run.join("epochs.csv")),
        epochs_without_seconds(&root.join("run_b/epochs.csv"))
    );

    let final_ckpt = run.join("final");
    let report = root.join("psp_eval.json");
    ok(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--ckpt",
        final_ckpt.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let r = read_json(&report);
    assert_eq!(r["report"]["cases"].as_array().unwrap().len(), 2);
    assert_eq!(r["report"]["mean_dice"].as_array().unwrap().len(), 2);

    let text = ok(&["inspect", "--ckpt", final_ckpt.to_str().unwrap()]);
    assert!(text.starts_with("depth 3"), "{text}");
    assert!(text.contains("branch parameters:"), "{text}");
    let js: Value = serde_json::from_str(&ok(&["inspect", "--ckpt", final_ckpt.to_str().unwrap(), "--json"])).unwrap();
    assert_eq!(js["depth"], 3);

    let tl: Value = serde_json::from_str(&ok(&[
        "timeline",
        "--events",
        run.join("events.jsonl").to_str().unwrap(),
        "--epochs",
        "4",
    ]))
    .unwrap();
    assert_eq!(tl, read_json(&run.join("timeline.json")));

    // retrain the compact architecture and compare
    let cfg_r = root.join("retrain.json");
    write_config(
        &cfg_r,
        json!({ "mode": "retrain", "architecture": "run/final", "output_dir": "retrain", "epochs": 2 }),
    );
    ok(&["train", "--config", cfg_r.to_str().unwrap()]);
    let report_r = root.join("retrain_eval.json");
    ok(&[
        "eval",
        "--config",
        cfg_r.to_str().unwrap(),
        "--ckpt",
        root.join("retrain/final").to_str().unwrap(),
        "--out",
        report_r.to_str().unwrap(),
    ]);
    let table = root.join("comparison.md");
    ok(&[
        "compare",
        &format!("pruned={}", report.display()),
        &format!("retrained={}", report_r.display()),
        "--out",
        table.to_str().unwrap(),
    ]);
    let t = fs::read_to_string(&table).unwrap();
    assert!(t.starts_with("| model | params |"), "{t}");
    assert!(t.contains("| pruned |") && t.contains("| retrained |"), "{t}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = prmseg(&["generate-data", "--out", "x", "--count", "2", "--dims", "16,16"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected D,H,W"));

    let out = prmseg(&["compare", "no-equals-sign"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("NAME=REPORT.json"));

    let missing = dir.path().join("missing.json");
    let out = prmseg(&["train", "--config", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = prmseg(&["inspect", "--ckpt", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
