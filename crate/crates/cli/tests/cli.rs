use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densift::io::{write_csv, Manifest};
use densift::simulate::{gen_design, DesignSpec};
use serde_json::Value;
use tempfile::TempDir;

fn densift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densift"))
        .args(args)
        .env_remove("DENSIFT_THREADS")
        .output()
        .expect("binary runs")
}

fn fixture(dir: &Path, design: u8, n: usize) -> (PathBuf, PathBuf) {
    let data = gen_design(&DesignSpec::new(design, n, 6, 11, 1), 0).unwrap().data;
    let csv = dir.join("data.csv");
    write_csv(&data, std::fs::File::create(&csv).unwrap()).unwrap();
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string(&Manifest::of(&data)).unwrap()).unwrap();
    (csv, manifest)
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(densift(&["--help"]).status.code(), Some(0));
    assert_eq!(densift(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(densift(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(densift(&["simulate", "--design", "1", "--n", "100"]).status.code(), Some(1));
    let out = densift(&["simulate", "--design", "9", "--n", "100", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_column_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (csv, manifest) = fixture(dir.path(), 1, 60);
    let text = std::fs::read_to_string(&csv).unwrap();
    let trimmed: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    std::fs::write(&csv, trimmed).unwrap();
    let out = densift(&["screen", "--csv", csv.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn screen_reports_ranking() {
    let dir = TempDir::new().unwrap();
    let (csv, manifest) = fixture(dir.path(), 1, 150);
    let v = json(&densift(&[
        "screen",
        "--csv",
        csv.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--p-tilde",
        "4",
        "--threshold-c",
        "0.5",
    ]));
    assert_eq!(v["meta"]["command"], "screen");
    assert_eq!(v["result"]["ranked"].as_array().unwrap().len(), 6);
    assert_eq!(v["result"]["retained"].as_array().unwrap().len(), 3);
    assert!(v["result"]["threshold"]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn refine_and_cde_outputs() {
    let dir = TempDir::new().unwrap();
    let (csv, manifest) = fixture(dir.path(), 1, 120);
    let (c, m) = (csv.to_str().unwrap(), manifest.to_str().unwrap());
    let v = json(&densift(&["refine", "--csv", c, "--manifest", m, "--protect-w"]));
    assert!(v["result"]["cv_table"].as_array().unwrap().len() >= 8);
    assert!(v["result"]["selected"].as_array().unwrap().iter().any(|s| s == "w"));
    let v = json(&densift(&["cde", "--csv", c, "--manifest", m]));
    let dens = v["result"]["evaluations"]["density"].as_array().unwrap();
    assert_eq!(dens.len(), 120);
    assert!(dens.iter().all(|d| d.as_f64().unwrap() >= 0.0));
}

#[test]
fn pscore_within_unit_interval() {
    let dir = TempDir::new().unwrap();
    let (csv, manifest) = fixture(dir.path(), 4, 120);
    let v = json(&densift(&["pscore", "--csv", csv.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]));
    let p = v["result"]["propensity"].as_array().unwrap();
    assert_eq!(p.len(), 120);
    assert!(p.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
}

#[test]
fn ate_reports_estimate_and_interval() {
    let dir = TempDir::new().unwrap();
    let (csv, manifest) = fixture(dir.path(), 4, 160);
    let v = json(&densift(&[
        "ate",
        "--csv",
        csv.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--trim",
        "0.05,0.95",
        "--split-seed",
        "3",
    ]));
    let r = &v["result"];
    let (psi, se) = (r["psi_hat"].as_f64().unwrap(), r["se"].as_f64().unwrap());
    assert!(se > 0.0);
    assert!((r["ci95"][0].as_f64().unwrap() - (psi - 1.96 * se)).abs() < 1e-9);
    assert!((r["ci95"][1].as_f64().unwrap() - (psi + 1.96 * se)).abs() < 1e-9);
    assert!(r["balance"].is_array());
}

#[test]
fn bad_trim_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (csv, manifest) = fixture(dir.path(), 4, 40);
    let out = densift(&[
        "ate",
        "--csv",
        csv.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--trim",
        "0.9,0.1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_screening_json() {
    let v = json(&densift(&[
        "simulate", "--design", "1", "--n", "100", "--p", "6", "--reps", "3", "--seed", "5",
    ]));
    assert_eq!(v["meta"]["seed"], 5);
    let all = v["result"]["all_crr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&all));
}

#[test]
fn output_is_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let args = ["simulate", "--design", "2", "--n", "80", "--p", "6", "--reps", "4", "--seed", "9"];
    let one = densift(&[&args[..], &["--threads", "1"]].concat());
    let again = densift(&[&args[..], &["--threads", "1"]].concat());
    let three = densift(&[&args[..], &["--threads", "3"]].concat());
    assert!(one.status.success());
    assert_eq!(one.stdout, again.stdout);
    assert_eq!(one.stdout, three.stdout);

    let (csv, manifest) = fixture(dir.path(), 4, 100);
    let out = dir.path().join("ate.json");
    let run = |t: &str| {
        let o = densift(&[
            "ate",
            "--csv",
            csv.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--threads",
            t,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(&out).unwrap()
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn config_file_is_echoed_and_validated() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scale_grid": [1.0], "reps": 2}"#).unwrap();
    let v = json(&densift(&[
        "--config", cfg.to_str().unwrap(), "simulate", "--design", "1", "--n", "60", "--p", "6", "--seed", "1",
    ]));
    assert_eq!(v["meta"]["config_echo"]["reps"], 2);
    std::fs::write(&cfg, r#"{"nonsense": 1}"#).unwrap();
    let out = densift(&["--config", cfg.to_str().unwrap(), "simulate", "--design", "1", "--n", "60", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
