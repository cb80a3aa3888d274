use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn feel(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feel-sched"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .env("FEEL_SCHED_THREADS", "1")
        .output()
        .expect("binary runs")
}

const SHORT: [&str; 4] = ["--set", "trainer.rounds=20", "--set", "data.total_samples=600"];

#[test]
fn run_writes_csv_and_summary_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--seeds", "2", "--set", "scheduler.rho=0.25"];
    args.extend(SHORT);
    let out = feel(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(dir.path().join("default_seed1.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("round,"), "{header}");
    assert_eq!(csv.lines().count(), 21);
    assert!(dir.path().join("default_seed2.csv").exists());

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("default_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rho"], serde_json::json!(0.25));
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = vec!["run", "--seed-list", "5", "--set", "scheduler.devices_per_round=3"];
    args.extend(SHORT);
    assert!(feel(&args, a.path()).status.success());
    assert!(feel(&args, b.path()).status.success());
    let read = |d: &Path| fs::read(d.join("default_seed5.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn bad_input_exits_with_configuration_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = feel(&["run", "--set", "scheduler.rho=1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho"));

    let out = feel(&["run", "--config", "/nonexistent/cfg.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_suite_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = feel(&["verify", "bandwidth"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("verify_bandwidth.json").exists());
}

#[test]
fn compare_tabulates_variants() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["compare", "--seeds", "2", "--variant", "scheduler.policy=\"uniform_random\""];
    args.extend(SHORT);
    let out = feel(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert!(csv.starts_with("label,policy,rho,devices_per_round,bandwidth_hz,"));
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("compare.txt").exists());

    // a variant changing more than policy or rho is refused without --force
    let mut args = vec!["compare", "--seeds", "1", "--variant", "channel.bandwidth_hz=2e7"];
    args.extend(SHORT);
    assert_eq!(feel(&args, dir.path()).status.code(), Some(2));
}
