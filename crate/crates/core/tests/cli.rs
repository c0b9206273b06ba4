//! End-to-end checks of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

fn levyap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levyap"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn defaults_feed_back_as_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = levyap(&["defaults", "-o", "run.toml"], dir.path());
    assert!(o.status.success());
    let o = levyap(
        &["fp-solve", "--config", "run.toml", "--grid", "64", "--epsilon", "0.2", "--summary", "s.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# levyap-schema v1\ntheta,mu\n"));
    assert_eq!(text.lines().count(), 66);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    assert!(summary["residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(summary["config"]["fpcircle"]["grid"], 64);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["lyapunov", "--set", "run.nonsense=1"],
        vec!["lyapunov", "--method", "newton"],
        vec!["lyapunov", "--epsilon", "-1"],
        vec!["sweep", "--epsilons", "0.1,0.2"],
        vec!["sweep", "--set", "sweep.epsilons=[]"],
        vec!["sweep", "--epsilons", "0.1,0.2,0.3,0.35"],
        vec!["fp-solve", "--system", "duffing"],
        vec!["simulate", "--config", "missing.toml"],
        vec!["frobnicate"],
    ] {
        let o = levyap(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn config_errors_name_the_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[run]\nepsilon = 0.1\nepsilom = 0.2\n").unwrap();
    let o = levyap(&["lyapunov", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("epsilom") && err.contains("line 3"), "{err}");
}

#[test]
fn zero_horizon_simulation_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = levyap(&["simulate", "--horizon", "0"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "# levyap-schema v1\nt,x1,x2,h\n");
}

#[test]
fn origin_start_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = levyap(&["simulate", "--set", "estimator.x0=[0.0, 0.0]", "--horizon", "1"], dir.path());
    assert!(o.status.success());
    assert!(stderr(&o).contains("exited at t = 0"));
    let o = levyap(&["lyapunov", "--set", "estimator.x0=[0.0, 0.0]", "--horizon", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lyapunov_json_carries_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["lyapunov", "--epsilon", "0.3", "--horizon", "40", "--replicates", "4", "--dt", "0.01", "--seed", "9"];
    let o = levyap(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["estimate"]["method"], "direct");
    assert_eq!(v["estimate"]["per_replicate"].as_array().unwrap().len(), 4);
    assert_eq!(v["config"]["estimator"]["seed"], 9);
    assert_eq!(v["config"]["run"]["epsilon"], 0.3);
    assert!(v.get("runtime_seconds").is_none());
    let again = levyap(&args, dir.path());
    assert_eq!(o.stdout, again.stdout);
    let mut timed = args.to_vec();
    timed.push("--timing");
    let t: serde_json::Value = serde_json::from_slice(&levyap(&timed, dir.path()).stdout).unwrap();
    assert!(t["runtime_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn compare_flags_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["lyapunov", "--epsilon", "0.2", "--replicates", "8", "--dt", "0.01", "--compare", "fpcircle"];
    // A long horizon agrees with the circle solver; a very short one is biased
    // by the initial transient.
    let mut long = base.to_vec();
    long.extend(["--horizon", "800"]);
    let o = levyap(&long, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["comparison"]["agree"], true);
    let mut short = base.to_vec();
    short.extend(["--horizon", "5"]);
    let o = levyap(&short, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("disagree"));
}

#[test]
fn sweep_writes_table_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = levyap(
        &["sweep", "--method", "fpcircle", "--grid", "128", "--epsilons", "0.05,0.1,0.2,0.4", "-o", "s.csv", "--fit", "f.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# levyap-schema v1");
    assert_eq!(lines[1], "epsilon,lambda,stderr,method,included");
    assert_eq!(lines.len(), 6);
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("f.json")).unwrap()).unwrap();
    let slope = fit["slope"].as_f64().unwrap();
    assert!((slope - 2.0 / 3.0).abs() < 0.1, "{slope}");
}

#[test]
fn lyapunov_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = levyap(&["lyapunov", "--method", "fpcircle", "--grid", "64", "--csv", "row.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("row.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "epsilon,lambda,stderr,method");
    assert!(lines[2].ends_with(",fpcircle"));
}
