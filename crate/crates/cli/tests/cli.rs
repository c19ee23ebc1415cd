use std::fs;
use std::path::Path;
use std::process::Command;

use cestrade_cli::{cmd_sweep_alpha, cmd_validate, DynamicsArgs};

fn cestrade(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cestrade")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn fixture(name: &str) -> String {
    format!("{}/../core/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn copy_fixture_with_battery(dir: &Path, battery: &str) -> String {
    let text = fs::read_to_string(fixture("s1.json")).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&text).unwrap();
    config["battery"] = serde_json::from_str(battery).unwrap();
    fs::copy(fixture("s1.csv"), dir.join("s1.csv")).unwrap();
    let path = dir.join("s1.json");
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_fixture() {
    let (code, stdout, _) = cestrade(&["validate", &fixture("default.json")]);
    assert_eq!(code, 0);
    assert!(stdout.contains("6 participants"));
    let summary = cmd_validate(&fixture("default.json")).unwrap();
    assert_eq!(summary.households, 10);
    assert_eq!(summary.profiles, 729);
    // the leaky battery cannot sit idle for a day
    assert!(!summary.idle.is_feasible());
}

#[test]
fn invalid_batteries_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = copy_fixture_with_battery(
        dir.path(),
        r#"{"capacity": 100.0, "q0": 50.0, "tau": 1.5, "beta_plus": 1.0, "beta_minus": 1.0}"#,
    );
    let (code, _, stderr) = cestrade(&["validate", &path]);
    assert_eq!(code, 1);
    assert!(stderr.contains("0 < tau <= 1"), "{stderr}");
    let path = copy_fixture_with_battery(
        dir.path(),
        r#"{"capacity": 100.0, "q0": 150.0, "tau": 1.0, "beta_plus": 1.0, "beta_minus": 1.0}"#,
    );
    let (code, _, stderr) = cestrade(&["validate", &path]);
    assert_eq!(code, 1);
    assert!(stderr.contains("q0"), "{stderr}");
}

#[test]
fn solve_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, _, stderr) = cestrade(&["solve", &fixture("s1.json"), "--h", "1,1", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{stderr}");
    }
    for name in ["solution.csv", "solution.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let csv = fs::read_to_string(a.join("solution.csv")).unwrap();
    assert!(csv.starts_with("# config_sha256: "));
    assert!(csv.lines().nth(1).unwrap().starts_with("slot,ces_price,ces_grid_trade,charge,grid_price,total_load"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("solution.json")).unwrap()).unwrap();
    assert_eq!(json["revenue"], 3.125);
}

#[test]
fn bad_profile_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) =
        cestrade(&["solve", &fixture("s1.json"), "--h", "5,1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("--h"));
    let (code, _, _) = cestrade(&["solve", &fixture("s1.json"), "--h", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 1);
    let (code, _, _) = cestrade(&["frobnicate"]);
    assert_eq!(code, 1);
}

#[test]
fn default_scenario_charge_stays_in_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = cestrade(&["solve", "builtin:default", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let text = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    for row in reader.records() {
        let q: f64 = row.unwrap()[3].parse().unwrap();
        assert!(q > 0.0 && q <= 80.0);
    }
}

#[test]
fn participation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, stderr) = cestrade(&["participation", "builtin:three_player", "--model", "pt", "--alpha", "0.4", "--out", out]);
    assert_eq!(code, 0, "{stderr}");
    let probs = fs::read_to_string(dir.path().join("probabilities.csv")).unwrap();
    assert_eq!(probs.lines().nth(1).unwrap(), "model,alpha,user,p_start1,p_start3,p_start5");
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(probs.as_bytes());
    for row in reader.records() {
        let row = row.unwrap();
        let sum: f64 = (3..6).map(|i| row[i].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    assert!(dir.path().join("trace.csv").exists());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["run"]["metrics"]["expected_revenue"].is_number());

    let (code, _, _) = cestrade(&["participation", "builtin:three_player", "--model", "pt", "--alpha", "1.5", "--out", out]);
    assert_eq!(code, 1);
    let (code, _, _) = cestrade(&["participation", "builtin:three_player", "--alpha", "0.4,0.5", "--model", "pt", "--out", out]);
    assert_eq!(code, 1);
    let (code, _, _) = cestrade(&["participation", "builtin:three_player", "--y0", "0.5,0.5", "--out", out]);
    assert_eq!(code, 1);
}

#[test]
fn alpha_one_sweep_matches_eut() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_sweep_alpha("builtin:three_player", &[1.0], &DynamicsArgs::default(), dir.path()).unwrap();
    assert_eq!(report.runs.len(), 2);
    let (eut, pt) = (&report.runs[0], &report.runs[1]);
    for (a, b) in eut.probabilities.iter().flatten().zip(pt.probabilities.iter().flatten()) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert!((eut.metrics.expected_revenue - pt.metrics.expected_revenue).abs() <= 1e-9);
}

#[test]
fn sweep_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let grid = ["--grid", "0.1,0.4,0.7"];
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let (code, _, stderr) =
            cestrade(&["sweep-alpha", &fixture("three_player.json"), grid[0], grid[1], "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{stderr}");
    }
    for name in ["sweep_probabilities.csv", "sweep_metrics.csv", "sweep.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(name)).unwrap(), fs::read(dir.path().join("b").join(name)).unwrap());
    }
    let probs = fs::read_to_string(dir.path().join("a/sweep_probabilities.csv")).unwrap();
    // EUT rows plus three PT blocks, three users each
    assert_eq!(probs.lines().count(), 2 + 4 * 3);
}

#[test]
fn worker_variable_is_checked() {
    let out = Command::new(env!("CARGO_BIN_EXE_cestrade"))
        .args(["validate", "builtin:s1"])
        .env("CES_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_cestrade"))
        .args(["validate", "builtin:s1"])
        .env("CES_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}
