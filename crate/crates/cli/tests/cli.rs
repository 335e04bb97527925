use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use breakiv::pipeline::PipelineReport;
use breakiv_cli::{EstimateReport, McOutput};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_breakiv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn breakiv")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn simulate(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let p = dir.path().join(name);
    let mut args = vec!["simulate", "--out", p.to_str().unwrap()];
    args.extend_from_slice(extra);
    stdout(&run(&args));
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn all_estimators_tsgmm_not_less_precise_than_gmm() {
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "d.csv", &["--seed", "11", "--t", "800"]);
    let o = run(&["estimate", "--data", s(&d), "--break", "320", "--estimator", "all", "--format", "json"]);
    let rep: EstimateReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep.estimates.len(), 3);
    let (gmm, tsgmm) = (&rep.estimates[0], &rep.estimates[2]);
    for (a, b) in tsgmm.std_errors.iter().zip(gmm.std_errors.iter()) {
        assert!(*a <= *b * (1.0 + 1e-9), "TSGMM se {a} > GMM se {b}");
    }
    assert_eq!(rep.psd_differences.len(), 3);
    assert_eq!(rep.psd_differences[0].pair, "GMM - TSGMM");
}

#[test]
fn missing_break_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "d.csv", &[]);
    let o = run(&["estimate", "--data", s(&d)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["estimate", "--data", s(&d), "--break", "160", "--scan"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["estimate", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn singular_design_is_a_numerical_error() {
    // The simulated data already carry a constant, so a second one is collinear.
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "d.csv", &[]);
    let o = run(&["estimate", "--data", s(&d), "--break", "160", "--add-intercept"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "d.csv", &[]);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"trimming": 0.15, "colour": "blue"}"#).unwrap();
    let o = run(&["estimate", "--data", s(&d), "--break", "160", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"estimator": "tsgmm"}"#).unwrap();
    let o = run(&["estimate", "--data", s(&d), "--break", "160", "--config", s(&cfg), "--format", "json"]);
    let rep: EstimateReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep.estimates.len(), 1);
    assert_eq!(rep.estimates[0].kind.label(), "TSGMM");
}

#[test]
fn json_output_round_trips_and_artifacts_are_written() {
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "d.csv", &["--seed", "5"]);
    let out = dir.path().join("out");
    let o = run(&["estimate", "--data", s(&d), "--scan", "--format", "json", "--out-dir", s(&out), "--hac", "bartlett", "--bw", "auto"]);
    let text = stdout(&o);
    let rep: EstimateReport = serde_json::from_str(&text).unwrap();
    assert!(rep.break_estimated);
    let again: EstimateReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
    assert_eq!(rep, again);
    let from_file: EstimateReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(rep, from_file);
    let csv = std::fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert!(csv.starts_with("estimator,regime,coefficient"));
    // 3 estimators, 2 regimes, 2 coefficients.
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(out.join("estimate.md").exists());
}

#[test]
fn pipeline_on_stable_data_finds_nothing() {
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "s.csv", &["--stable", "--seed", "4"]);
    let o = run(&["pipeline", "--data", s(&d), "--format", "json"]);
    let rep: PipelineReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(rep.first_stage_breaks.is_empty());
    assert!(rep.structural_breaks.is_empty());
    assert!(rep.common_breaks.is_empty());
    assert_eq!(rep.final_estimates.len(), 1);
}

#[test]
fn breaktest_rejects_a_large_break() {
    let dir = TempDir::new().unwrap();
    let d = simulate(&dir, "d.csv", &["--seed", "2"]);
    let o = run(&["breaktest", "--data", s(&d), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["test"]["decision_at"]["0.05"], serde_json::Value::Bool(true));
    let k = v["break_estimate"]["break_idx"].as_u64().unwrap();
    assert!((155..=165).contains(&k), "{k}");
}

#[test]
fn critvals_are_ordered_and_deterministic() {
    let args = ["critvals", "--p", "2", "--paths", "2000", "--grid", "200", "--seed", "9", "--format", "csv"];
    let a = stdout(&run(&args));
    let b = stdout(&run(&args));
    assert_eq!(a, b);
    let row: Vec<f64> = a.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    let (cv10, cv05, cv01) = (row[2], row[3], row[4]);
    assert!(0.0 < cv10 && cv10 < cv05 && cv05 < cv01);
}

#[test]
fn mc_is_deterministic_given_seed() {
    let go = |seed: &str, threads: &str| {
        let o = run(&["mc", "--reps", "40", "--t", "200", "--seed", seed, "--threads", threads, "--format", "json"]);
        serde_json::from_str::<McOutput>(&stdout(&o)).unwrap()
    };
    let a = go("3", "1");
    let b = go("3", "4");
    assert_eq!(a, b);
    let c = go("4", "2");
    assert_ne!(a, c);
    let rep = a.report.unwrap();
    assert_eq!(rep.n_ok + rep.n_failures, 40);
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = simulate(&dir, "a.csv", &["--seed", "8"]);
    let b = simulate(&dir, "b.csv", &["--seed", "8"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}
