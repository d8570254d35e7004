use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msc::model::ModelConfig;
use msc::train::{RunConfig, TrainConfig};
use serde_json::Value;

fn msc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msc")).args(args).output().expect("spawn msc")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tiny_run(dir: &Path) -> PathBuf {
    let run = RunConfig {
        model: ModelConfig::tiny(),
        schedule: Default::default(),
        train: TrainConfig {
            steps: 4,
            batch: 2,
            eval_batch: 2,
            gate_log_every: 2,
            ..TrainConfig::default()
        },
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_vec_pretty(&run).unwrap()).unwrap();
    path
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["mask", "--bogus"][..],
        &["mask", "--grid", "2x1"],
        &["snr", "--seed", "1", "--trials", "10"],
        &["gradcheck"],
        &["train", "--seed", "1", "--out", "/nonexistent", "--config", "/nonexistent/run.json"],
        &["synth", "--seed", "1", "--out", "/tmp/x", "--velocity", "1"],
    ] {
        let out = msc(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn two_frame_mask_is_lower_triangular() {
    let dir = tempfile::tempdir().unwrap();
    let out = msc(&[
        "mask", "--grid", "2x1x1", "--branch", "low", "--stride", "1",
        "--out", dir.path().to_str().unwrap(),
    ]);
    let v = json(&out);
    assert_eq!(v["pbm"], "P1\n2 2\n1 0\n1 1\n");
    assert_eq!(v["pairs"], 3);
    assert_eq!(fs::read_to_string(dir.path().join("mask.pbm")).unwrap(), "P1\n2 2\n1 0\n1 1\n");
}

#[test]
fn non_causal_mask_is_full() {
    let v = json(&msc(&["mask", "--grid", "2x1x1", "--non-causal"]));
    assert_eq!(v["pbm"], "P1\n2 2\n1 1\n1 1\n");
}

#[test]
fn gradcheck_passes_at_seed_seven() {
    let v = json(&msc(&["gradcheck", "--seed", "7", "--seeds", "1"]));
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn flops_defaults_report_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&msc(&["flops", "--config", "defaults", "--out", dir.path().to_str().unwrap()]));
    let report = &v["report"];
    assert_eq!(report["baseline_flops"]["exact"], "3221225472");
    assert!(report["printed"].is_object());
    assert!(report["derived"].is_object());
    assert!(!report["discrepancy_notes"].as_array().unwrap().is_empty());
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), msc::cost::SWEEP_HEADER);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn train_resume_and_sample_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let cfg = cfg.to_str().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let rest = dir.path().join("rest");
    let s = json(&msc(&["train", "--config", cfg, "--seed", "3", "--out", full.to_str().unwrap()]));
    assert_eq!(s["steps"], 4);
    assert_eq!(s["checkpoint"], "checkpoint");
    json(&msc(&["train", "--config", cfg, "--seed", "3", "--stop-at", "2", "--out", part.to_str().unwrap()]));
    json(&msc(&[
        "train", "--config", cfg, "--seed", "3", "--out", rest.to_str().unwrap(),
        "--resume", part.join("checkpoint").to_str().unwrap(),
    ]));
    assert_eq!(files(&full.join("checkpoint")), files(&rest.join("checkpoint")));

    let sample = dir.path().join("sample");
    let v = json(&msc(&[
        "sample", "--config", cfg, "--checkpoint", full.join("checkpoint").to_str().unwrap(),
        "--seed", "5", "--out", sample.to_str().unwrap(),
    ]));
    assert_eq!(v["shape"], serde_json::json!([3, 4, 4, 2]));
    assert_eq!(v["audit"]["future_reads"], 0);
    assert_eq!(fs::read_dir(sample.join("frames")).unwrap().count(), 3);
}

#[test]
fn audit_passes_with_failing_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let v = json(&msc(&["audit", "--config", cfg.to_str().unwrap(), "--trials", "3", "--seed", "2"]));
    assert_eq!(v["causal_pass"], true);
    assert_eq!(v["negative_control_failed"], true);
}

#[test]
fn stochastic_commands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let cfg = cfg.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["synth", "--shape", "4x8x8x1", "--seed", "9"],
        vec!["snr", "--trials", "10000", "--seed", "9"],
        vec!["sample", "--config", cfg, "--seed", "9"],
        vec!["train", "--config", cfg, "--seed", "9"],
        vec!["audit", "--config", cfg, "--trials", "2", "--seed", "9"],
    ];
    for (i, case) in cases.iter().enumerate() {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{i}-{rep}"));
            let mut args = case.clone();
            let out_str = out.to_str().unwrap().to_string();
            args.extend(["--out", &out_str]);
            let o = msc(&args);
            assert!(o.status.success(), "{case:?}");
            runs.push((o.stdout, files(&out)));
        }
        assert_eq!(runs[0], runs[1], "{case:?}");
    }
}
