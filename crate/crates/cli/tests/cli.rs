use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dingdate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dingdate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Synthesize a small corpus and return (data, schema) paths.
fn small_corpus(dir: &Path, name: &str, seed: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = write(dir, "synth.json", r#"{"samples": 240, "feature_dim": 12, "noise": 0.5}"#);
    let data = dir.join(format!("{name}.jsonl"));
    let out = dingdate(&["synth", "--config", arg(&config), "--out", arg(&data), "--seed", seed]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let schema = dir.join(format!("{name}.schema.json"));
    assert!(schema.exists());
    (data, schema)
}

#[test]
fn stats_reports_uniform_period_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "uniform.json", r#"{"period_counts": [40,40,40,40,40,40,40,40,40,40,40], "feature_dim": 4}"#);
    let data = dir.path().join("uniform.jsonl");
    assert!(dingdate(&["synth", "--config", arg(&config), "--out", arg(&data)]).status.success());
    let schema = dir.path().join("uniform.schema.json");

    let out = dingdate(&["stats", "--data", arg(&data), "--graph", arg(&schema), "--attribute", "shape", "--format", "json"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let h = report["entropy"].as_f64().unwrap();
    assert!((h - 3.459).abs() < 1e-3, "H = {h}");
    assert!(report["gain"].as_f64().unwrap() >= 0.0);

    let table = dingdate(&["stats", "--data", arg(&data), "--graph", arg(&schema), "--attribute", "characteristic"]);
    assert!(table.status.success());
    assert!(String::from_utf8_lossy(&table.stdout).contains("H(D|A)"));
}

#[test]
fn gradcheck_passes() {
    let out = dingdate(&["gradcheck", "--seed", "4", "--instances", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["failures"], 0);
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn usage_errors_exit_two() {
    let out = dingdate(&["stats", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(dingdate(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dingdate(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, schema) = small_corpus(dir.path(), "d", "1");
    let missing = dir.path().join("missing.jsonl");
    let out = dingdate(&["stats", "--data", arg(&missing), "--graph", arg(&schema), "--attribute", "shape"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = write(
        dir.path(),
        "bad.jsonl",
        r#"{"id":"x","dynasty":"Shang","period":"Late Western Zhou","shape":"shape-0"}"#,
    );
    let out = dingdate(&["stats", "--data", arg(&bad), "--graph", arg(&schema), "--attribute", "shape"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

fn train_and_eval(dir: &Path, tag: &str, threads: &str) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let (data, schema) = small_corpus(dir, tag, "9");
    let config = write(dir, "train.json", r#"{"epochs": 4, "patience": 2, "hidden_dim": 8, "lr": 0.003}"#);
    let ckpt = dir.join(format!("{tag}.ckpt.json"));
    let out = dingdate(&[
        "--threads",
        threads,
        "train",
        "--data",
        arg(&data),
        "--graph",
        arg(&schema),
        "--config",
        arg(&config),
        "--out",
        arg(&ckpt),
        "--ablation",
        "full",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read(dir.join(format!("{tag}.ckpt.json.history.csv"))).unwrap();
    let eval = dingdate(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&data), "--split", "test", "--format", "csv"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    (fs::read(&data).unwrap(), history, eval.stdout)
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_and_eval(dir.path(), "a", "1");
    let b = train_and_eval(dir.path(), "b", "1");
    let c = train_and_eval(dir.path(), "c", "2");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let history = String::from_utf8(a.1).unwrap();
    assert!(history.starts_with("epoch,lr,loss,"));
    assert!(String::from_utf8(a.2).unwrap().contains("period_oa,"));
}

#[test]
fn infer_emits_one_line_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = small_corpus(dir.path(), "d", "2");
    let config = write(dir.path(), "train.json", r#"{"epochs": 2, "patience": 1, "hidden_dim": 8}"#);
    let ckpt = dir.path().join("m.json");
    let out = dingdate(&[
        "train",
        "--data",
        arg(&data),
        "--graph",
        arg(&schema),
        "--config",
        arg(&config),
        "--out",
        arg(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let features = write(
        dir.path(),
        "f.jsonl",
        &format!(
            "{}\n{{\"id\": \"probe\", \"features\": {}}}\n",
            serde_json::to_string(&vec![0.1; 12]).unwrap(),
            serde_json::to_string(&vec![-0.2; 12]).unwrap()
        ),
    );
    let out = dingdate(&["infer", "--ckpt", arg(&ckpt), "--features", arg(&features)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["id"], "probe");
    let marginals = lines[0]["marginals"].as_array().unwrap();
    assert_eq!(marginals.len(), 4 + 11 + 8 + 16);
    assert!(marginals.iter().all(|m| (0.0..=1.0).contains(&m["marginal"].as_f64().unwrap())));
}
