use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn conmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conmamba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Defaults as echoed by the binary, shrunk to something that trains in seconds.
fn small_config(dir: &Path) -> Value {
    let probe = dir.join("defaults");
    let out = conmamba(&["synth", "--out", probe.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(probe.join("synth.config.json")).unwrap()).unwrap();
    cfg["encoder"] = json!({
        "image_size": 16, "channels": 3, "patch_size": 4, "d_model": 8,
        "n_blocks": 1, "d_inner": 8, "n_state": 4, "proj_dim": 6
    });
    cfg["dataset"]["synthetic"]["image_size"] = json!(16);
    cfg["dataset"]["synthetic"]["per_class"] = json!(8);
    cfg["train"]["epochs"] = json!(2);
    cfg["train"]["checkpoint_interval"] = json!(1);
    cfg["probe"]["steps"] = json!(20);
    cfg.as_object_mut().unwrap().remove("output_dir");
    cfg
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn pretrain_probe_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(tmp.path()));
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = conmamba(&["pretrain", "--config", &cfg, "--out", run_s]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run.join("encoder.ckpt").is_file());
    assert!(run.join("pretrain.config.json").is_file());
    let history = std::fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert!(history.lines().count() > 1);

    // follow-up commands pick up the echoed pretraining config
    for cmd in ["probe", "eval", "embed"] {
        let out = conmamba(&[cmd, "--out", run_s]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(run.join("metrics.txt").is_file());
    let emb = std::fs::read_to_string(run.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 3 * 8);
}

#[test]
fn missing_config_field_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg["train"].as_object_mut().unwrap().remove("temperature");
    let path = write_config(tmp.path(), &cfg);
    let out = conmamba(&["pretrain", "--config", &path, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("temperature"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn invalid_value_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &small_config(tmp.path()));
    let out = conmamba(&["pretrain", "--config", &path, "--tau", "0", "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn eval_without_checkpoints_reports_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &small_config(tmp.path()));
    let out = conmamba(&["eval", "--config", &path, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("missing checkpoint") && err.contains("encoder.ckpt"), "{err}");
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let ok = conmamba(&["gradcheck", "--ops-only", "--trials", "3"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let table = String::from_utf8(ok.stdout).unwrap();
    assert!(table.lines().skip(1).all(|l| l.ends_with(",ok")), "{table}");

    let bad = conmamba(&["gradcheck", "--ops-only", "--trials", "3", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn bench_scan_prints_csv() {
    let ok = conmamba(&["bench-scan", "--lengths", "16,32", "--repeats", "2"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let csv = String::from_utf8(ok.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "L,sequential_ns,parallel_ns,max_abs_diff");
    assert_eq!(lines.len(), 3);

    let none = conmamba(&["bench-scan", "--lengths", "16", "--repeats", "0"]);
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(tmp.path()));
    let ds = tmp.path().join("ds");
    let out = conmamba(&["synth", "--config", &cfg, "--out", ds.to_str().unwrap(), "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(ds.join("manifest.json").is_file());

    // the written folder then serves as --data for training
    let run = tmp.path().join("run");
    let out = conmamba(&[
        "pretrain", "--config", &cfg, "--data", ds.to_str().unwrap(), "--epochs", "1",
        "--out", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(run.join("pretrain.config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["epochs"], json!(1));
    assert!(echoed["dataset"]["folder"].is_object(), "{echoed}");
}
