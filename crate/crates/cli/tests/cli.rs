use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempograph")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr_error(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)));
    v["error"].clone()
}

const TINY: &str = r#"
seeds = [0, 1, 2]

[model]
channels = 4
latent_h = 2
latent_w = 4
hidden = 8
gtm_layers = 1
activation = "gelu"

[model.body]
vertices_per_part = 2
coarse_per_part = 1

[model.tpdist]
steps = 10
noise_depth = 2
heads = 2

[train]
steps = 6
batch_size = 2

[data]
train = 4
test = 3

[data.motion]
frames = 4
"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();

    let out = run(&["generate", "--config", &cfg, "--out", data]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!((v["train"].as_u64(), v["test"].as_u64()), (Some(4), Some(3)));
    assert!(dir.path().join("data/graph.json").exists());
    assert!(dir.path().join("data/test_00002.bin").exists());

    let ckpt = dir.path().join("m.ckpt");
    let curve = dir.path().join("curve.csv");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--data",
        data,
        "--out",
        ckpt.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["steps"].as_u64(), Some(6));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 7);

    let csv = dir.path().join("m.csv");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data, "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mean = stdout_json(&out)["mean"]["mpvpe"].as_f64().unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!((rows.iter().sum::<f64>() / 3.0 - mean).abs() < 1e-9);

    // same checkpoint, same bytes
    let again = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn identity_predictor_on_clean_split_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d");
    assert!(run(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let out = run(&["eval", "--predictor", "identity", "--split", "clean", "--data", data.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("sequence_id,mpvpe_mm,mpjpe_mm,pa_mpjpe_mm"));
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!((f[0], f[1]), (0.0, 0.0));
        assert!(f[2] < 1e-9);
    }
}

#[test]
fn ablate_writes_a_hashed_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let report = dir.path().join("r.json");
    let out = run(&["ablate", "--config", &cfg, "--out", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["cells"].as_array().unwrap().len(), 4);
    assert_eq!(doc["report_hash"], summary["report_hash"]);
    assert_eq!(summary["failed_cells"].as_u64(), Some(0));
}

#[test]
fn invalid_config_exits_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let out = run(&["generate", "--config", p.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_error(&out);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("batch_size"));

    std::fs::write(&p, "{ broken").unwrap();
    let out = run(&["generate", "--config", p.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["kind"], "config");
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--predictor", "mean-pose", "--data", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["kind"], "io");

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let data = dir.path().join("d");
    let cfg = tiny_config(dir.path());
    assert!(run(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let out = run(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["kind"], "checkpoint");
}

#[test]
fn usage_errors_are_json_too() {
    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["kind"], "usage");
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn gradcheck_passes_and_reports_every_entry() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let out = run(&["gradcheck", "--seed", "3", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(doc["failed"].as_array().unwrap().is_empty());
    let entries = doc["entries"].as_array().unwrap();
    assert!(entries.iter().any(|e| e["name"] == "model"));
    assert!(entries.iter().all(|e| e["max_rel_error"].as_f64().unwrap() < 1e-4));
}
