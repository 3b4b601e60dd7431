use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tnvd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnvd"))
        .args(args)
        .env("TNVD_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

const MINIMAL: &str = r#"
name = "minimal"

[model]
n = 4
h = 0.5

[ansatz]
layers = 4
chi_a = 4

[train]
max_steps = 200
learning_rate = 0.01
"#;

#[test]
fn show_defaults_is_a_valid_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tnvd(&["show-defaults"], tmp.path());
    assert!(out.status.success());
    let path = tmp.path().join("defaults.toml");
    fs::write(&path, &out.stdout).unwrap();
    let v = tnvd(&["validate", path.to_str().unwrap()], tmp.path());
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
}

#[test]
fn minimal_run_produces_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("minimal.toml");
    fs::write(&cfg, MINIMAL).unwrap();
    let out = tnvd(&["-q", "run", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("minimal");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["f"].as_f64().unwrap().is_finite());
    assert!(summary["epsilon"].as_f64().is_some());
    assert!(dir.join("train_log.csv").exists());

    let again = tnvd(&["-q", "analyze", dir.to_str().unwrap()], tmp.path());
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
}

#[test]
fn bad_field_exits_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nn = 4\nh = 0.5\n\n[train]\nmax_step = 3\n").unwrap();
    let out = tnvd(&["validate", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max_step") && err.contains("line 6"), "{err}");
}

#[test]
fn epsilon_at_twenty_sites_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("big.toml");
    fs::write(&cfg, "[model]\nn = 20\nh = 0.5\n\n[analysis]\nepsilon = true\n").unwrap();
    let out = tnvd(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn sweep_from_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.toml");
    fs::write(
        &cfg,
        "name = \"layers\"\n[model]\nn = 4\nh = 0.5\n[ansatz]\nchi_a = 2\n[train]\nmax_steps = 5\n",
    )
    .unwrap();
    let out = tnvd(
        &["-q", "sweep", cfg.to_str().unwrap(), "--axis", "layers", "--values", "1,2", "-w", "1"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("layers").join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(tmp.path().join("layers").join("layers_1").join("summary.json").exists());

    let empty = tnvd(&["sweep", cfg.to_str().unwrap(), "--axis", "n", "--values", ""], tmp.path());
    assert_ne!(empty.status.code(), Some(0));
}
