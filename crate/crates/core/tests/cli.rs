mod common;

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskcl"))
}

#[test]
fn oracle_verbs_succeed() {
    for subject in ["match", "pq"] {
        let out = bin().args(["oracle", subject, "--trials", "25", "--seed", "4"]).output().unwrap();
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("25/25 trials agree"));
    }
}

#[test]
fn gradcheck_verb_reports_components() {
    let out = bin().args(["gradcheck", "--probes", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["focal", "dice", "mask_ce", "kd", "ad", "total"] {
        assert!(text.contains(name), "{name} missing");
    }
}

#[test]
fn gen_data_run_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let mut cfg = common::tiny_config();
    cfg.output_dir = dir.path().join("run");
    fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();

    let data = dir.path().join("data");
    let st = bin().args(["gen-data", "--config"]).arg(&cfg_path).arg("--out").arg(&data).status().unwrap();
    assert!(st.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["steps"].as_array().unwrap().len(), 3);
    assert!(fs::read(data.join("train.cmfd")).unwrap().starts_with(b"CMFD"));

    let st = bin().args(["run", "--config"]).arg(&cfg_path).status().unwrap();
    assert!(st.success());
    assert!(fs::read(dir.path().join("run/step0.cmfk")).unwrap().starts_with(b"CMFK"));

    let st = bin().args(["plot", "--from"]).arg(dir.path()).status().unwrap();
    assert!(st.success());
    assert!(fs::read_to_string(dir.path().join("curves.svg")).unwrap().contains("<polyline"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"name": "x", "losses": {"alpha": 20, "beta": 1}}"#).unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));
}
