use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foresight_core::synth::DatasetConfig;

const TINY: &str = r#"{"model": {"d_ctx": 16, "width": 16, "heads": 2, "point_width": 8, "n_points": 16, "knn_k": 4, "sampling_steps": 10},
    "train": {"batch_size": 4, "warmup_batches": 2, "eval_every": 0}}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foresight")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, kind: &str, count: &str, seed: &str) -> PathBuf {
    let out = dir.join(kind);
    ok(&["synth-gen", "--kind", kind, "--count", count, "--seed", seed, "--points", "16", "--out", p(&out)]);
    std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|f| f.extension().is_some_and(|x| x == "jsonl"))
        .unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = run(&["eval", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn constant_velocity_baseline_is_exact_on_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { n_points: 16, jitter_trans: 0.0, jitter_rot: 0.0, ..DatasetConfig::constant_velocity(12, 4) };
    let cfg_path = dir.path().join("cv.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = dir.path().join("data");
    ok(&["synth-gen", "--config", p(&cfg_path), "--out", p(&data)]);
    let out = dir.path().join("eval");
    ok(&["eval", "--data", p(&data.join("cv.jsonl")), "--out", p(&out)]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("predictor,ade,"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let cv = rows.iter().find(|r| r[0] == "constant_velocity").unwrap();
    let cp = rows.iter().find(|r| r[0] == "constant_pose").unwrap();
    assert!(cv[1].parse::<f64>().unwrap() < 1e-9, "{cv:?}");
    assert!(cp[1].parse::<f64>().unwrap() > 0.01, "{cp:?}");
    assert!(rows.iter().all(|r| r[0] != "model"));
}

#[test]
fn train_sample_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, "mixed", "12", "5");
    let cfg = d.join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = d.join("run");
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--steps", "3", "--out", p(&run_dir)]);
    let ck = run_dir.join("checkpoint.ofck");
    let curve = std::fs::read_to_string(run_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let sample = |seed: &str, out: &str| {
        let dir = d.join(out);
        ok(&["sample", "--checkpoint", p(&ck), "--data", p(&data), "--seed", seed, "--samples", "3", "--out", p(&dir)]);
        let json = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|f| f.extension().is_some_and(|x| x == "json"))
            .unwrap();
        std::fs::read(json).unwrap()
    };
    let a = sample("1", "s1");
    assert_eq!(a, sample("1", "s1b"));
    assert_ne!(a, sample("2", "s2"));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["samples"].as_array().unwrap().len(), 3);

    let eval_dir = d.join("eval");
    ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--samples", "2", "--out", p(&eval_dir)]);
    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().any(|l| l.starts_with("model,")));

    let summary = ok(&["inspect", p(&ck)]);
    assert!(!summary.trim().is_empty());
    let summary = ok(&["inspect", p(&data)]);
    assert!(summary.contains("12"), "{summary}");
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tr = synth(d, "constant-velocity", "8", "1");
    let val_dir = d.join("val");
    ok(&["synth-gen", "--count", "4", "--seed", "2", "--points", "16", "--out", p(&val_dir), "--stem", "val"]);
    let cfg = d.join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = d.join("ablate");
    ok(&[
        "ablate",
        "--train",
        p(&tr),
        "--val",
        p(&val_dir.join("val.jsonl")),
        "--C",
        "1,3",
        "--H",
        "4,8",
        "--config",
        p(&cfg),
        "--steps",
        "1",
        "--out",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}

#[test]
fn curate_stream_writes_a_funnel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth-gen", "--kind", "stream", "--count", "4", "--seed", "3", "--out", p(d)]);
    let out = d.join("curated");
    ok(&["curate", "--input", p(&d.join("stream.jsonl")), "--out", p(&out)]);
    let funnel = std::fs::read_to_string(out.join("funnel.csv")).unwrap();
    assert_eq!(funnel.lines().next(), Some("stage,count"));
    assert!(funnel.lines().count() > 2);
    assert!(out.join("windows.jsonl").exists());
}

#[test]
fn gradcheck_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let text = ok(&["gradcheck", "--config", p(&cfg), "--samples", "20"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(v["probes"].as_u64().unwrap() >= 20);
}
