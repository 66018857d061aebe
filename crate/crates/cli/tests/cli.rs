use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fluidrisk::gallery;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fluidrisk"));
    c.env_remove("FLUIDRISK_THREADS");
    c
}

fn config(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, gallery::by_name(name).unwrap().to_json()).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--out-dir").arg(dir).args(args).output().unwrap();
    if !out.stderr.is_empty() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

const SMALL_GRID: &[&str] = &["--cells-u", "32", "--cells-l", "32"];

#[test]
fn validate_writes_manifest_with_config_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "mmpp");
    let out = run(tmp.path(), &["validate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("validate.manifest.json")).unwrap()).unwrap();
    let hash = hex::encode(Sha256::digest(fs::read(&cfg).unwrap()));
    assert_eq!(manifest["config_sha256"], Value::String(hash));
    assert_eq!(manifest["command"], "validate");
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert!(tmp.path().join("validate.json").exists());
}

#[test]
fn malformed_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"states\": [1.0, -1.0], \"alpha\": ").unwrap();
    let out = run(tmp.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn first_return_rows_are_substochastic() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "model-a");
    let mut args = vec!["first-return", cfg.to_str().unwrap(), "--theta1", "0", "--theta2", "0"];
    args.extend_from_slice(SMALL_GRID);
    let out = run(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv(&tmp.path().join("first-return.csv"));
    assert!(!rows.is_empty());
    let total: f64 = rows.iter().filter(|r| r[0] == "0").map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!(total <= 1.0 + 1e-12 && total > 0.99, "row sum {total}");
}

#[test]
fn non_convergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "model-a");
    let mut args = vec!["first-return", cfg.to_str().unwrap(), "--max-iter", "2"];
    args.extend_from_slice(SMALL_GRID);
    assert_eq!(run(tmp.path(), &args).status.code(), Some(3));
}

#[test]
fn mc_output_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "mmpp");
    let args = ["mc", "first-return", cfg.to_str().unwrap(), "--paths", "3000", "--seed", "5", "--theta1", "0.2"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&a, &args).status.code(), Some(0));
    assert_eq!(bin().arg("--threads").arg("1").arg("--out-dir").arg(&b).args(args).status().unwrap().code(), Some(0));
    let (x, y) = (fs::read(a.join("mc-first-return.csv")).unwrap(), fs::read(b.join("mc-first-return.csv")).unwrap());
    assert_eq!(x, y);
    let header = String::from_utf8(x).unwrap();
    assert!(header.starts_with("i,j,value,std_error"));
}

#[test]
fn convergence_study_agrees_with_monte_carlo() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "model-a-priced");
    let out = run(
        tmp.path(),
        &["convergence-study", cfg.to_str().unwrap(), "--theta1", "0.5", "--theta2", "0.5", "--paths", "20000", "--seed", "3"],
    );
    let rows = csv(&tmp.path().join("convergence-study.csv"));
    assert_eq!(out.status.code(), Some(0), "{rows:?}");
}

#[test]
fn bridge_writes_orders_and_binary_dump() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "model-a");
    let dump = tmp.path().join("tensor.bin");
    let mut args = vec!["bridge", cfg.to_str().unwrap(), "--n-max", "4", "--dump", dump.to_str().unwrap()];
    args.extend_from_slice(SMALL_GRID);
    assert_eq!(run(tmp.path(), &args).status.code(), Some(0));
    let rows = csv(&tmp.path().join("bridge.csv"));
    assert_eq!(rows.len(), 3);
    let bytes = fs::read(&dump).unwrap();
    assert_eq!(&bytes[..4], b"FRBT");
}

#[test]
fn gmatrix_and_density_write_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "calendar");
    assert_eq!(run(tmp.path(), &["gmatrix", cfg.to_str().unwrap(), "--t", "3"]).status.code(), Some(0));
    assert_eq!(csv(&tmp.path().join("gmatrix.csv")).len(), 4);
    assert_eq!(run(tmp.path(), &["density", cfg.to_str().unwrap(), "--y", "0.5,1,4"]).status.code(), Some(0));
    let rows = csv(&tmp.path().join("density.csv"));
    let cdf: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn finite_time_rejects_models_with_arrivals() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "model-a");
    assert_eq!(run(tmp.path(), &["finite-time", cfg.to_str().unwrap(), "--t", "2"]).status.code(), Some(2));
}
