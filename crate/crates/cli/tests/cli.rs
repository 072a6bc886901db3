use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anarchy_track::harness::{read_aggregate, read_metrics};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anarchy-track"));
    c.env_remove("ANARCHY_TRACK_WORKERS");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
K = 2
M = 2
tau = 4
T = 12
seed = 3
trials = 4
trackers = ["jc", "ci", "pdaf"]
metrics = ["nmse", "rate"]
"#;

#[test]
fn run_writes_metrics_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = bin()
        .args(["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--trials", "3"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 12 * 3);
    assert!(rows.iter().all(|r| r.device == 1 && r.rate_bits.is_some()));
    let agg = read_aggregate(&out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.len(), 12 * 3);
    assert!(stdout(&o).contains("metrics.csv"));
}

#[test]
fn seed_and_workers_do_not_change_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let run = |out: &str, workers: &str, env: Option<&str>| {
        let mut c = bin();
        if let Some(w) = env {
            c.env("ANARCHY_TRACK_WORKERS", w);
        }
        let o = c
            .args(["run", "--config", &cfg, "--out", out, "--seed", "9", "--workers", workers])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        fs::read_to_string(Path::new(out).join("metrics.csv")).unwrap()
    };
    let a = run(dir.path().join("a").to_str().unwrap(), "1", None);
    let b = run(dir.path().join("b").to_str().unwrap(), "3", Some("2"));
    assert_eq!(a, b);
}

#[test]
fn all_devices_flag_emits_every_device() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = bin()
        .args(["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--all-devices"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert!(rows.iter().any(|r| r.device == 2));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "K = 2\nM = 1\nlambdas = [0.5, 1.5]\ntrackers = [\"jc\"]\n");
    let o = bin()
        .args(["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambdas"));
}

#[test]
fn bad_worker_variable_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let o = bin()
        .env("ANARCHY_TRACK_WORKERS", "zero")
        .args(["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn poa_beyond_the_enumeration_budget_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "k2.toml", "K = 2\nM = 1\ntrackers = [\"jc\"]\n");
    let o = bin()
        .args(["poa", "--config", &cfg, "--t", "7", "--trials", "10"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_arguments_exit_with_two() {
    let o = bin().args(["run", "--config", "x.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn poa_and_bound_print_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "poa.toml",
        "K = 2\nM = 1\nlambdas = [0.5, 0.5]\ntrackers = [\"optimal\"]\n",
    );
    let o = bin().args(["bound", "--config", &cfg]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let bound: f64 = stdout(&o).trim().parse().unwrap();
    assert!(bound > 0.0);

    let o = bin()
        .args(["poa", "--config", &cfg, "--t", "1", "--trials", "400"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let field = |k: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("poa") >= 0.0);
    assert_eq!(field("bound"), bound);
    assert!(field("poa") <= bound + 2.0 * field("std_error"));
}
