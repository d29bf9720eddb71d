use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn eimlab(args: &[&str], dir: &Path, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eimlab"));
    cmd.args(args).current_dir(dir).env_remove("EIMLAB_OUT");
    if let Some(p) = env_out {
        cmd.env("EIMLAB_OUT", p);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const THEORY: &str = r#"{"command":"theory","samples":20000,"m_values":[1,2],"d_values":[4],"alpha_values":[1.0],"c_values":[0.1]}"#;

#[test]
fn misspelled_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"command":"edit","lamda":0.5}"#);
    let out = eimlab(&["edit", "--config", &cfg], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["stage"], "config");
    assert!(err["error"].as_str().unwrap().contains("lamda"));
}

#[test]
fn command_must_match_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t.json", THEORY);
    let out = eimlab(&["sde", "--config", &cfg], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_sweep_grid_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.json", r#"{"command":"sweep","sweep_command":"edit","grid":{"lambda":[]}}"#);
    let out = eimlab(&["sweep", "--config", &cfg, "--out", "o"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_failure_exits_1_with_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "e.json", r#"{"command":"edit","attribute":"color","to":"purple"}"#);
    let out = eimlab(&["edit", "--config", &cfg, "--out", "run"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(1));
    let err = json(&tmp.path().join("run/error.json"));
    assert!(!err["stage"].as_str().unwrap().is_empty());
    assert!(err["error"].as_str().unwrap().contains("purple"));
    let manifest = json(&tmp.path().join("run/manifest.json"));
    assert_eq!(manifest["status"], "failed");
}

#[test]
fn manifest_lists_every_artifact_with_its_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t.json", THEORY);
    let out = eimlab(&["theory", "--config", &cfg, "--out", "run", "--deterministic"], tmp.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["command"], "theory");
    let outputs = manifest["outputs"].as_array().unwrap();
    let names: Vec<&str> = outputs.iter().map(|o| o["name"].as_str().unwrap()).collect();
    for want in ["config.json", "summary.json", "concentration.csv", "concentration.svg", "concentration.txt", "extension.json"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    for o in outputs {
        let bytes = std::fs::read(run.join(o["name"].as_str().unwrap())).unwrap();
        assert_eq!(o["bytes"], bytes.len());
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    assert!(!run.join(".manifest.json.tmp").exists());
}

#[test]
fn reruns_are_byte_identical_and_default_dir_follows_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t.json", THEORY);
    let runs = tmp.path().join("runs-env");
    let a = eimlab(&["theory", "--config", &cfg, "--deterministic"], tmp.path(), Some(&runs));
    assert!(a.status.success());
    let dir = String::from_utf8_lossy(&a.stdout).lines().next().unwrap().to_string();
    assert!(Path::new(&dir).starts_with(&runs), "{dir}");
    assert!(Path::new(&dir).file_name().unwrap().to_string_lossy().starts_with("theory-"));
    let first = std::fs::read(Path::new(&dir).join("concentration.csv")).unwrap();
    let b = eimlab(&["theory", "--config", &cfg, "--out", "again", "--jobs", "3"], tmp.path(), None);
    assert!(b.status.success());
    assert_eq!(first, std::fs::read(tmp.path().join("again/concentration.csv")).unwrap());
}

#[test]
fn seed_flag_changes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t.json", THEORY);
    let dirs: Vec<String> = ["1", "2"]
        .iter()
        .map(|s| {
            let o = eimlab(&["theory", "--config", &cfg, "--seed", s], tmp.path(), Some(&tmp.path().join("r")));
            assert!(o.status.success());
            String::from_utf8_lossy(&o.stdout).lines().next().unwrap().to_string()
        })
        .collect();
    assert_ne!(dirs[0], dirs[1]);
}
