use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wisteria(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wisteria"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "gen": {
            "num_records": 80, "num_classes": 4, "feature_dim": 5, "num_sites": 1,
            "prototype_separation": 3.0, "feature_noise_sd": 0.5, "prototype_jitter": 0.0
        },
        "operators": [
            {"kind": "channel", "operator_id": 0, "confusion": {"symmetric": {"flip_rate": 0.2}}},
            {"kind": "channel", "operator_id": 1, "confusion": {"symmetric": {"flip_rate": 0.2}}}
        ],
        "graph": {"branching": 2, "depth": 2},
        "model": {"hidden_dim": 4, "activation": "tanh", "init_scale": 0.5},
        "loss": {
            "lambda": 1.0, "gamma": 0.1, "agreement_kind": "sym_kl", "eps_clamp": 1e-8,
            "batch_size": 16, "learning_rate": 0.05, "momentum": 0.9, "epochs": 3
        },
        "protocol": "main",
        "seeds": [3]
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert!(wisteria(&["generate", "--config", &cfg, "--out", &p("data")]).status.success());
    assert!(wisteria(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("model")]).status.success());
    let out = wisteria(&[
        "eval",
        "--checkpoint",
        &p("model/checkpoint.ckpt"),
        "--data",
        &p("data"),
        "--out",
        &p("report.json"),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("auroc\t")));
    assert!(dir.path().join("report.reliability.csv").is_file());

    let out = wisteria(&["sweep", "--config", &cfg, "--protocol", "ablation", "--out", &p("sweep")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sweep/summary.csv").is_file());
    assert!(wisteria(&["report", "--in", &p("sweep"), "--out", &p("summary.md")]).status.success());
    let md = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(md.contains("no_ontology"));
}

#[test]
fn unknown_config_key_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["loss"]["lamda"] = serde_json::json!(1.0);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = wisteria(&["generate", "--config", &cfg, "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn invalid_value_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["loss"]["learning_rate"] = serde_json::json!(-1.0);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = wisteria(&["sweep", "--config", &cfg, "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = wisteria(&["generate", "--config", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert!(wisteria(&["generate", "--config", &cfg, "--out", &p("data")]).status.success());
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = wisteria(&["eval", "--checkpoint", &p("bad.ckpt"), "--data", &p("data"), "--out", &p("r.json")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["model"]["activation"] = serde_json::json!("identity");
    v["loss"]["learning_rate"] = serde_json::json!(1e200);
    fs::write(&cfg, v.to_string()).unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert!(wisteria(&["generate", "--config", &cfg, "--out", &p("data")]).status.success());
    let out = wisteria(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("model")]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
