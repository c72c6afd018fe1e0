use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spinecade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinecade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn config_flag_is_required() {
    let o = spinecade(&["edges"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn missing_mask_is_a_one_line_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.mhd"), "").unwrap();
    let cfg = write_config(dir.path(), r#"{"cases": [{"image": "a.mhd", "split": "train"}]}"#);
    let o = spinecade(&["edges", "--config", &cfg]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("spinecade: ConfigInvalid: cases[0].mask"), "{err}");
}

#[test]
fn bad_override_and_lock_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"output_dir": "out"}"#);
    let o = spinecade(&["phantom", "--config", &cfg, "--set", "seed"]);
    assert!(stderr(&o).starts_with("spinecade: ConfigInvalid: --set seed"), "{}", stderr(&o));

    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.spinecade.lock"), "").unwrap();
    let o = spinecade(&["phantom", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("spinecade: Locked:"), "{}", stderr(&o));
}

#[test]
fn phantom_stage_writes_manifest_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"output_dir": "out", "phantom": {"n_train": 1, "n_test": 1}}"#);
    let o = spinecade(&["phantom", "--config", &cfg, "--seed", "9", "--set", "phantom.n_test=2", "--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("phantom/test01.mhd").exists());
    assert!(!out.join(".spinecade.lock").exists());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("phantom/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["command"], "phantom");
    let outputs = m["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|k| k == "phantom/test01_annotations.csv"), "{outputs:?}");
}

#[test]
fn eval_without_predictions_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"output_dir": "out", "phantom": {"n_train": 1, "n_test": 1}}"#);
    assert!(spinecade(&["phantom", "--config", &cfg]).status.success());
    let o = spinecade(&["eval", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("spinecade: MissingUpstreamArtifact:"), "{}", stderr(&o));
}
