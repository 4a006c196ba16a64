//! Black-box tests of the command-line binary: CSV shapes, exit codes,
//! config-error reporting, and the manifest-echo round trip.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qdiscrim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdiscrim"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Data rows of a CSV artifact, skipping the comment header and column line.
fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn qe_single_trial_curve_starts_at_half_and_crosses_beta() {
    let dir = tempfile::tempdir().unwrap();
    let out = qdiscrim(dir.path(), &["qe", "--estimator", "posterior", "--n", "1"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("qe.csv"));
    assert_eq!(rows.len(), 30_001, "dt = 1e-3 to t = 30 plus t = 0");
    let first: f64 = rows[0][1].parse().unwrap();
    let last: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert_eq!(first, 0.5, "no-data error probability is the smaller prior");
    assert!(last < 0.01, "default-seed curve ends at {last}, expected < 0.01");
    assert!(String::from_utf8_lossy(&out.stderr).contains("crossed beta"));
}

#[test]
fn bench_emits_one_row_per_n_and_estimator() {
    let dir = tempfile::tempdir().unwrap();
    // short horizon: the row-count contract does not depend on t_max
    let out = qdiscrim(
        dir.path(),
        &["--set", "sim.t_max=2.0", "bench", "--n-list", "10,20"],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("bench.csv"));
    assert_eq!(rows.len(), 4);
    let labels: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    for want in [
        ("10", "posterior"),
        ("10", "counting"),
        ("20", "posterior"),
        ("20", "counting"),
    ] {
        assert!(
            labels.contains(&(want.0.to_string(), want.1.to_string())),
            "missing bench row {want:?} in {labels:?}"
        );
    }
    for r in &rows {
        let wall: f64 = r[3].parse().unwrap();
        assert!(wall > 0.0);
    }
}

#[test]
fn bench_skips_counting_at_n_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = qdiscrim(
        dir.path(),
        &["--set", "sim.t_max=1.0", "bench", "--n-list", "1"],
    );
    assert!(out.status.success());
    let rows = data_rows(&dir.path().join("bench.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "posterior");
}

#[test]
fn validate_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = qdiscrim(dir.path(), &["validate"]);
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("all checks passed"));
}

#[test]
fn invalid_efficiency_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = qdiscrim(dir.path(), &["--set", "measurement.eta=1.5", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("measurement.eta"), "stderr: {err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    fs::write(&cfg_path, r#"{ "sim": { "dtt": 0.001 } }"#).unwrap();
    let out = qdiscrim(
        dir.path(),
        &["--config", cfg_path.to_str().unwrap(), "simulate"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dtt"));
}

#[test]
fn override_lands_in_manifest_and_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = qdiscrim(
        dir.path(),
        &["--set", "sim.dt=5e-4", "--set", "sim.t_max=1.0", "qe", "--n", "2"],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "qe");
    assert_eq!(manifest["config"]["sim"]["dt"], 5e-4);
    assert_eq!(manifest["config"]["sim"]["t_max"], 1.0);
    let overrides: Vec<String> = manifest["overrides"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(overrides, ["sim.dt=5e-4", "sim.t_max=1.0"]);

    // Re-running from the echoed config alone must reproduce the same bytes.
    let dir2 = tempfile::tempdir().unwrap();
    let cfg_path = dir2.path().join("echo.json");
    fs::write(&cfg_path, manifest["config"].to_string()).unwrap();
    let out2 = qdiscrim(
        dir2.path(),
        &["--config", cfg_path.to_str().unwrap(), "qe", "--n", "2"],
    );
    assert!(out2.status.success());
    let a = fs::read(dir.path().join("qe.csv")).unwrap();
    let b = fs::read(dir2.path().join("qe.csv")).unwrap();
    assert_eq!(a, b, "manifest-echo config did not reproduce the qe CSV");
}
