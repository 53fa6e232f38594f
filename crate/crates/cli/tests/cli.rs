//! End-to-end runs of the `nafgp` binary.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 4
[model]
kind = "stat"
[fit]
max_outer = 3
stage2_steps = 10
[simulate]
axes = [{ lo = -0.5, hi = 0.5, count = 10 }, { lo = -0.5, hi = 0.5, count = 10 }]
sample_size = 50
"#;

fn nafgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nafgp")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn full_pipeline() {
    let dir = setup();
    let p = dir.path();
    let o = nafgp(p, &["--config", "run.toml", "--out", "o", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = nafgp(p, &["--config", "run.toml", "--out", "o", "fit", "--data", "o/train.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("GP_stat fitted to 50 observations"));
    let o = nafgp(p, &["--out", "o", "predict", "--model", "o/model.json", "--targets", "o/test.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = nafgp(p, &["--out", "o", "diagnose", "--truth", "o/test.csv", "--predictions", "o/predictions.csv", "--label", "GP_stat"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let scores = std::fs::read_to_string(p.join("o/scores.csv")).unwrap();
    let mut lines = scores.lines();
    assert_eq!(lines.next(), Some("model,MSPE,PICP,MPIW"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "GP_stat");
    let picp: f64 = row[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&picp));

    let preds = std::fs::read_to_string(p.join("o/predictions.csv")).unwrap();
    assert!(preds.starts_with("x,y,mean,std_error,lower,upper\n"));
    assert_eq!(preds.lines().count(), 1 + 50);
    let trace = std::fs::read_to_string(p.join("o/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,stage,log_likelihood,delta_norm\n0,initial,"));
}

#[test]
fn grid_prediction_with_data_kind() {
    let dir = setup();
    let p = dir.path();
    assert!(nafgp(p, &["--config", "run.toml", "simulate"]).status.success());
    assert!(nafgp(p, &["--config", "run.toml", "fit", "--data", "train.csv"]).status.success());
    let o = nafgp(p, &["predict", "--model", "model.json", "--grid", "-0.5:0.5:3,0", "--target-kind", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("predicted 3 targets (data level)"));
    let preds = std::fs::read_to_string(p.join("predictions.csv")).unwrap();
    let first: Vec<f64> = preds.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(&first[..2], &[-0.5, 0.0]);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(nafgp(p, &["--bogus"]).status.code(), Some(2));
    assert_eq!(nafgp(p, &["fit"]).status.code(), Some(2));
    std::fs::write(p.join("bad.toml"), "[model]\nkind = \"gp\"\n").unwrap();
    let o = nafgp(p, &["--config", "bad.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
    std::fs::write(p.join("big.toml"), "[simulate]\naxes = [{ lo = 0.0, hi = 1.0, count = 5 }]\nsample_size = 6\n").unwrap();
    let o = nafgp(p, &["--config", "big.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exceeds"), "{}", stderr(&o));
}

#[test]
fn malformed_input_reports_line() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("obs.csv"), "x,y,value\n0,0,1\n# note\n0.5,x1,2\n").unwrap();
    let o = nafgp(p, &["--config", "run.toml", "fit", "--data", "obs.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("obs.csv:4: column 'y'"), "{}", stderr(&o));

    std::fs::write(p.join("dup.csv"), "x,value\n0.5,1\n0.25,2\n0.5,3\n").unwrap();
    let o = nafgp(p, &["--config", "run.toml", "fit", "--data", "dup.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dup.csv:4: duplicate location (first seen on line 2)"), "{}", stderr(&o));
}

#[test]
fn archive_version_mismatch_is_reported() {
    let dir = setup();
    let p = dir.path();
    assert!(nafgp(p, &["--config", "run.toml", "simulate"]).status.success());
    assert!(nafgp(p, &["--config", "run.toml", "fit", "--data", "train.csv"]).status.success());
    let text = std::fs::read_to_string(p.join("model.json")).unwrap();
    std::fs::write(p.join("model.json"), text.replacen("\"version\":1", "\"version\":9", 1)).unwrap();
    let o = nafgp(p, &["predict", "--model", "model.json", "--targets", "test.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 9 is not supported"), "{}", stderr(&o));
}

#[test]
fn diagnose_rejects_mismatched_locations() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("truth.csv"), "x,value\n0,1\n1,2\n").unwrap();
    std::fs::write(p.join("pred.csv"), "x,mean,std_error,lower,upper\n0,1,1,0,2\n2,2,1,1,3\n").unwrap();
    let o = nafgp(p, &["diagnose", "--truth", "truth.csv", "--predictions", "pred.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pred.csv:3: location does not match line 3"), "{}", stderr(&o));
}
