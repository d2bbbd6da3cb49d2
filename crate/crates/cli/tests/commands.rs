use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dcgrid(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcgrid"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn status(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn config_hash_line(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    text.lines()
        .next()
        .unwrap()
        .trim_start_matches("# config hash ")
        .to_string()
}

const SHORT_RUN: [&str; 10] = [
    "--preset",
    "cs2",
    "--T",
    "1",
    "--dt",
    "2e-4",
    "--set",
    "simulation.scenario.events=[]",
    "--set",
    "simulation.scenario.controller_enabled=true",
];

#[test]
fn equilibrium_reports_consensus_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(dir.path(), &["--preset", "cs2", "equilibrium"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&dir.path().join("equilibrium.json"));
    assert_eq!(v["kind"], "equilibrium");
    assert_eq!(
        v["config_hash"].as_str().unwrap(),
        config_hash_line(dir.path())
    );
    let lam = v["result"]["state"]["ctrl"]["lambda"].as_array().unwrap();
    assert_eq!(lam.len(), 4);
    for l in lam {
        assert!((l.as_f64().unwrap() + 0.31).abs() < 5e-3, "lambda {l}");
    }
}

#[test]
fn certify_without_leakage_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(
        dir.path(),
        &[
            "--preset",
            "cs2",
            "--set",
            "controller.alpha=0",
            "--set",
            "controller.b_v=0",
            "certify",
        ],
    );
    assert_eq!(status(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&dir.path().join("certificate.json"));
    assert_eq!(v["result"]["pass"], false);
}

/// Fails with the shipped defaults: see the acceptance notes in the README.
#[test]
fn certify_cs2_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(dir.path(), &["--preset", "cs2", "--jobs", "2", "certify"]);
    assert!(dir.path().join("certificate.json").exists());
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--set", "controller.nope=1", "equilibrium"][..],
        &["--set", "controller.alpha=true", "equilibrium"][..],
        &["--preset", "nosuch", "equilibrium"][..],
        &["--set", "controller.tau=-1", "equilibrium"][..],
    ] {
        let o = dcgrid(dir.path(), args);
        assert_eq!(status(&o), 2, "{args:?}");
        assert!(
            String::from_utf8_lossy(&o.stderr).starts_with("error:"),
            "{args:?}"
        );
    }
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(
        dir.path(),
        &["--config", "/nonexistent/run.toml", "equilibrium"],
    );
    assert_eq!(status(&o), 2);
}

#[test]
fn echoed_config_reloads_to_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(
        dir.path(),
        &["--preset", "pi", "--seed", "5", "equilibrium"],
    );
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = config_hash_line(dir.path());

    let again = tempfile::tempdir().unwrap();
    let o = dcgrid(
        again.path(),
        &[
            "--config",
            dir.path().join("config.toml").to_str().unwrap(),
            "equilibrium",
        ],
    );
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(config_hash_line(again.path()), first);
    assert_eq!(read_json(&again.path().join("equilibrium.json"))["seed"], 5);
}

#[test]
fn identical_runs_write_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = SHORT_RUN.to_vec();
    args.extend(["--seed", "11", "simulate"]);
    for d in [&a, &b] {
        let o = dcgrid(d.path(), &args);
        assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = std::fs::read(a.path().join("trajectory.csv")).unwrap();
    let tb = std::fs::read(b.path().join("trajectory.csv")).unwrap();
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    let text = String::from_utf8(ta).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "t");
    assert!(header.contains(&"share_err_pu"));
    assert!(header.contains(&"share1_pu"));
    let rows = text.lines().skip(1).count();
    assert!(rows >= 10, "{rows} rows");

    let m = read_json(&a.path().join("metrics.json"));
    assert_eq!(m["kind"], "metrics");
    assert_eq!(m["result"]["containment_violations"], 0);
}

#[test]
fn reduced_simulation_writes_slow_states() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SHORT_RUN.to_vec();
    args.extend(["simulate", "--reduced"]);
    let o = dcgrid(dir.path(), &args);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("reduced.csv")).unwrap();
    assert!(text.starts_with("t,lam1,"));
    assert!(text.lines().count() > 2);
}

#[test]
fn linearize_writes_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(dir.path(), &["--preset", "cs2", "linearize"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let spec = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    // 4 n_g + n_e + n_k states for the default four-bus ring.
    assert_eq!(spec.lines().count(), 1 + 25);
    let v = read_json(&dir.path().join("linearization.json"));
    assert!(v["result"]["max_real"].as_f64().unwrap() < 0.0);
}

#[test]
fn sweep_rows_sorted_by_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcgrid(
        dir.path(),
        &[
            "--preset",
            "cs2",
            "--jobs",
            "3",
            "--set",
            "sweep.values=[100.0, 1.0, 10.0]",
            "sweep",
        ],
    );
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&dir.path().join("sweep.json"));
    let values: Vec<f64> = v["result"]["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["value"].as_f64().unwrap())
        .collect();
    assert_eq!(values, [1.0, 10.0, 100.0]);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "param,value,re,im");
    assert_eq!(csv.lines().count(), 1 + 3 * 25);
    assert!(csv.lines().nth(1).unwrap().starts_with("tau_p+tau_d,1.0,"));
}
