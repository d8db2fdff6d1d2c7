use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use exitbench_core::trace::read_traces;
use serde_json::Value;

const STAGES: [&str; 8] = [
    "train", "corrupt", "trace", "knn-build", "adapt-bn", "eval", "sweep", "report",
];

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "seed": 11,
  "output_dir": "out",
  "data": {{
    "train": {{"minishapes": {{"n": 160, "seed": 1}}}},
    "test": {{"minishapes": {{"n": 60, "seed": 2}}}}
  }},
  "model": {{"widths": [4, 4, 8]}},
  "training": {{"train": {{"epochs": 1, "batch_size": 32, "lr": 0.05, "decay_epochs": []}}}},
  "corruptions": [{{"name": "gaussian_noise", "severity": 3}}, {{"name": "contrast", "severity": 5}}],
  "sweep": {{"confidence": [0.5, 0.9], "patience": [2], "knn_k": [3], "agreement": [0.6]}},
  "adapt": {{"batch_size": 20}}{extra}
}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

fn exitbench(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_exitbench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn run_all(cfg: &Path, out: &Path) {
    for stage in STAGES {
        let o = exitbench(&[stage, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(
            o.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_is_deterministic_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_all(&cfg, &a);
    run_all(&cfg, &b);

    let snap_a = snapshot(&a);
    assert_eq!(snap_a, snapshot(&b), "reruns differ");
    let names: Vec<String> = snap_a.iter().map(|(p, _)| p.display().to_string()).collect();
    for expected in [
        "model.ckpt",
        "train_log.csv",
        "traces/clean.jsonl",
        "traces/gaussian_noise-3.jsonl",
        "traces/contrast-5.jsonl",
        "traces/train.jsonl",
        "knn/exit_1.idx",
        "adapted/gaussian_noise-3.ckpt",
        "reports/clean.json",
        "curves/contrast-5.csv",
        "report.json",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}: {names:?}");
    }

    // Oracle accuracy reported equals the fraction of samples any exit gets right.
    let (_, traces) = read_traces(&a.join("traces/clean.jsonl")).unwrap();
    let any_right = traces
        .iter()
        .filter(|t| t.correct().iter().any(|&c| c))
        .count() as f64
        / traces.len() as f64;
    let report: Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    let oracle = report["clean"]["oracle_accuracy"].as_f64().unwrap();
    assert!((oracle - any_right).abs() < 1e-12, "{oracle} vs {any_right}");
    assert_eq!(report["corrupted"]["splits"], 2);
    assert_eq!(report["splits"].as_array().unwrap().len(), 2);

    let curve = fs::read_to_string(a.join("curves/clean.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert_eq!(rows.len(), 1 + 2 + 1 + 1);
    assert!(rows[0].starts_with("oracle,"));
    let oracle_row: Vec<f64> = rows[0].split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert!((oracle_row[0] - any_right).abs() < 1e-12);
}

#[test]
fn singleton_sweep_matches_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#",
  "eval": {"strategy": {"kind": "confidence", "threshold": 0.9}}"#,
    );
    let out = tmp.path().join("o");
    run_all(&cfg, &out);
    for split in ["clean", "gaussian_noise-3"] {
        let report: Value =
            serde_json::from_slice(&fs::read(out.join(format!("reports/{split}.json"))).unwrap()).unwrap();
        let curve = fs::read_to_string(out.join(format!("curves/{split}.csv"))).unwrap();
        let row = curve
            .lines()
            .find(|l| l.starts_with("confidence,0.9,"))
            .expect("confidence 0.9 row");
        let v: Vec<f64> = row.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[0], report["accuracy"].as_f64().unwrap());
        assert_eq!(v[1], report["compute_fraction"].as_f64().unwrap());
        assert_eq!(v[3], report["ut_pct"].as_f64().unwrap());
        assert_eq!(v[4], report["ot_pct"].as_f64().unwrap());
    }
}

#[test]
fn missing_upstream_artifact_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let o = exitbench(&["eval", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `trace` first"));
}

#[test]
fn bad_config_is_rejected_with_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), r#", "colour": 1"#);
    let o = exitbench(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let path = tmp.path().join("bad.json");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace(r#", "colour": 1"#, "")
        .replace(r#""severity": 5"#, r#""severity": 6"#);
    fs::write(&path, text).unwrap();
    let o = exitbench(&["corrupt", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("corruptions[1]"));
}
