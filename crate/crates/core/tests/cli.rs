use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chaosgrad"))
}

fn cfg(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("CHAOSGRAD_OUTPUT_DIR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_default_seed_7_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["verify", "--config", cfg("default.toml").to_str().unwrap(), "--seed", "7", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(dir.path().join("verification_report.json").exists());
}

#[test]
fn missing_config_exits_2() {
    let o = run(&["converge", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(cfg("small_d2.toml")).unwrap().replace("seed = 1", "seed = 1\nsede = 2");
    let p = dir.path().join("typo.toml");
    std::fs::write(&p, text).unwrap();
    let o = run(&["converge", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));
}

#[test]
fn cascade_demo_is_exactly_invariant() {
    let o = run(&["cascade-demo", "--beta", "1.0", "--levels", "12", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    let dev: f64 = s.split("max deviation ").nth(1).unwrap().split(',').next().unwrap().trim().parse().unwrap();
    assert!(dev <= 1e-12, "{s}");
}

#[test]
fn negative_control_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "verify",
        "--config",
        cfg("negative_control.toml").to_str().unwrap(),
        "--replicas",
        "500",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAILED"));
}

#[test]
fn converge_then_emit_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["converge", "--config", cfg("small_d2.toml").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("convergence_table.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "eta,N,mean_H_re,mean_H_im,rel_L2,stderr,replicas,seed");
    assert_eq!(csv.lines().count(), 1 + 2 + 1);

    let plots = dir.path().join("plots");
    let report = dir.path().join("convergence_report.json");
    let o = run(&["emit-plots", "--report", report.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(plots.join("convergence.csv").exists());
    let corr = std::fs::read_to_string(plots.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 1 + 4);
}

#[test]
fn reconstruct_field_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "reconstruct-field",
        "--config",
        cfg("small_d2.toml").to_str().unwrap(),
        "--replicas",
        "20",
        "--amplitudes",
        "1,0.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reconstruction.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 20);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["converge", "--config", cfg("small_d2.toml").to_str().unwrap(), "--replicas", "10"])
        .env("CHAOSGRAD_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("convergence_report.json").exists());
}
