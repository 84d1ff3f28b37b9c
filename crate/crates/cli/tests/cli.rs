//! End-to-end tests of the compiled binary: exit codes, JSON output shape,
//! file products, and the documented failure modes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smallnoise-gof"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn temp_dir(label: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smallnoise-cli-{label}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn simulate_ou(dir: &Path, epsilon: &str, n: &str, seed: &str) -> PathBuf {
    let traj = dir.join("traj.csv");
    let out = run(&[
        "simulate", "--model", "ou", "--theta", "1.0", "--epsilon", epsilon, "--n", n, "--seed",
        seed, "--out",
        traj.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(traj.exists());
    assert!(dir.join("traj.csv.meta.json").exists(), "sidecar must be written");
    traj
}

#[test]
fn help_and_version_exit_zero_and_usage_errors_exit_one() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["test1", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn simulate_estimate_test_round_trip() {
    let dir = temp_dir("roundtrip");
    let traj = simulate_ou(&dir, "0.05", "400", "42");
    let traj = traj.to_str().unwrap();

    let est = run(&["estimate", "--model", "ou", "--traj", traj]);
    assert!(est.status.success());
    let est_json = stdout_json(&est);
    let theta = est_json["theta_hat"][0].as_f64().unwrap();
    assert!((theta - 1.0).abs() < 0.3, "theta_hat = {theta}");
    assert_eq!(est_json["converged"], true);

    let curves1 = dir.join("curves1.csv");
    let t1 = run(&[
        "test1", "--model", "ou", "--traj", traj, "--curves",
        curves1.to_str().unwrap(),
    ]);
    assert!(t1.status.success(), "{}", String::from_utf8_lossy(&t1.stderr));
    let rep1 = stdout_json(&t1);
    assert_eq!(rep1["alpha"], 0.05);
    assert_eq!(rep1["n"], 400);
    assert!(rep1["statistic"].as_f64().unwrap() >= 0.0);
    assert_eq!(
        rep1["reject"].as_bool().unwrap(),
        rep1["statistic"].as_f64().unwrap() > rep1["threshold"].as_f64().unwrap()
    );
    let text1 = std::fs::read_to_string(&curves1).unwrap();
    assert!(text1.lines().nth(1).unwrap().starts_with("t,r,q,k,h"));

    let curves2 = dir.join("curves2.csv");
    let t2 = run(&[
        "test2", "--model", "ou", "--traj", traj, "--alpha", "0.1", "--curves",
        curves2.to_str().unwrap(),
    ]);
    assert!(t2.status.success(), "{}", String::from_utf8_lossy(&t2.stderr));
    let rep2 = stdout_json(&t2);
    assert_eq!(rep2["alpha"], 0.1);
    assert_eq!(rep2["epsilon"], 0.05);
    let text2 = std::fs::read_to_string(&curves2).unwrap();
    assert!(text2.lines().nth(1).unwrap().starts_with("t,u,w,transform"));

    // The ito flag changes the first-test statistic but not its validity.
    let t1_ito = run(&["test1", "--model", "ou", "--traj", traj, "--ito"]);
    assert!(t1_ito.status.success());
    let rep1_ito = stdout_json(&t1_ito);
    assert_ne!(rep1_ito["statistic"], rep1["statistic"]);

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn missing_sidecar_is_a_runtime_error() {
    let dir = temp_dir("nosidecar");
    let orphan = dir.join("orphan.csv");
    std::fs::write(&orphan, "t,x\n0.0,1.0\n1.0,1.5\n").unwrap();
    let out = run(&["test2", "--model", "ou", "--traj", orphan.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sidecar"), "stderr: {err}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn multiparameter_model_runs_second_test_only() {
    let dir = temp_dir("d2");
    let model_cfg = dir.join("affine.toml");
    std::fs::write(
        &model_cfg,
        r#"
schema_version = 1
horizon = 1.0
x0 = 0.0
h = ["1", "t"]
lower = [-5.0, -5.0]
upper = [5.0, 5.0]
"#,
    )
    .unwrap();
    let model = format!("linear:{}", model_cfg.display());
    let traj = dir.join("traj.csv");
    let sim = run(&[
        "simulate", "--model", &model, "--theta", "0.5,1.0", "--epsilon", "0.05", "--n", "300",
        "--seed", "7", "--out",
        traj.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let traj = traj.to_str().unwrap();

    let t1 = run(&["test1", "--model", &model, "--traj", traj]);
    assert_eq!(t1.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&t1.stderr).contains("scalar"));

    let t2 = run(&["test2", "--model", &model, "--traj", traj]);
    assert!(t2.status.success(), "{}", String::from_utf8_lossy(&t2.stderr));
    assert_eq!(stdout_json(&t2)["theta_hat"].as_array().unwrap().len(), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn quantiles_tables_are_readable_and_family_checked() {
    let dir = temp_dir("quantiles");
    let table_path = dir.join("bridge.csv");
    let q = run(&[
        "quantiles", "--family", "bridge", "--draws", "3000", "--truncation", "300", "--seed",
        "5", "--out",
        table_path.to_str().unwrap(),
    ]);
    assert!(q.status.success(), "{}", String::from_utf8_lossy(&q.stderr));
    let table = smallnoise_gof::QuantileTable::read_csv(&table_path).unwrap();
    assert_eq!(table.family, smallnoise_gof::LimitFamily::BridgeSq);
    assert_eq!(table.n_draws, 3000);

    // Path-method sampling prints to stdout with the documented header.
    let qp = run(&[
        "quantiles", "--family", "wiener", "--method", "path", "--draws", "500", "--truncation",
        "100", "--seed", "2",
    ]);
    assert!(qp.status.success());
    let text = String::from_utf8_lossy(&qp.stdout);
    assert!(text.contains("family,alpha,quantile,n_draws,truncation"));
    assert!(text.contains("wiener,"));

    // A bridge table is rejected by the second test at startup.
    let traj = simulate_ou(&dir, "0.1", "200", "11");
    let t2 = run(&[
        "test2", "--model", "ou", "--traj",
        traj.to_str().unwrap(),
        "--table",
        table_path.to_str().unwrap(),
    ]);
    assert_eq!(t2.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&t2.stderr).contains("wiener-law table"));

    // The same table drives the first test.
    let t1 = run(&[
        "test1", "--model", "ou", "--traj",
        traj.to_str().unwrap(),
        "--table",
        table_path.to_str().unwrap(),
    ]);
    assert!(t1.status.success(), "{}", String::from_utf8_lossy(&t1.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn experiment_size_writes_outputs_and_aborts_exit_two() {
    let dir = temp_dir("experiment");
    let cfg = dir.join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
schema_version = 1
model = "example1"
test = "both"
theta0 = [0.5]
epsilons = [0.2, 0.1]
replications = 5
n = 64
alpha = 0.05
seed = 99
"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = run(&[
        "experiment", "--config",
        cfg.to_str().unwrap(),
        "--kind", "size", "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = std::fs::read_to_string(out_dir.join("stats.csv")).unwrap();
    assert!(stats.starts_with("replication,epsilon,statistic,reject"));
    assert_eq!(stats.lines().count(), 1 + 2 * 2 * 5);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("result.json")).unwrap())
            .unwrap();
    assert_eq!(json["kind"], "size");
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);

    // An unattainable eigenvalue floor fails every replication: exit 2.
    let bad_cfg = dir.join("bad.toml");
    std::fs::write(
        &bad_cfg,
        r#"
schema_version = 1
model = "ou"
test = "second"
theta0 = [1.0]
epsilons = [0.1]
replications = 4
n = 64
alpha = 0.05
seed = 1
min_eig = 1e6
"#,
    )
    .unwrap();
    let aborted = run(&[
        "experiment", "--config",
        bad_cfg.to_str().unwrap(),
        "--kind", "size", "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(aborted.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&aborted.stderr).contains("aborted"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn distribution_check_writes_check_json() {
    let dir = temp_dir("check");
    let cfg = dir.join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
schema_version = 1
model = "example1"
test = "second"
theta0 = [0.5]
epsilons = [0.1]
replications = 3
n = 64
alpha = 0.05
seed = 17
"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = run(&[
        "experiment", "--config",
        cfg.to_str().unwrap(),
        "--kind", "check", "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cells: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("check.json")).unwrap())
            .unwrap();
    assert_eq!(cells.as_array().unwrap().len(), 1);
    let ks = cells[0]["ks_distance"].as_f64().unwrap();
    assert!(ks > 0.0 && ks <= 1.0);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn power_experiment_reports_diagnostics() {
    let dir = temp_dir("power");
    let cfg = dir.join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
schema_version = 1
model = "ou"
test = "first"
theta0 = [1.0]
epsilons = [0.05]
replications = 4
n = 200
alpha = 0.05
seed = 5
alternative = "-x + 0.5"
"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = run(&[
        "experiment", "--config",
        cfg.to_str().unwrap(),
        "--kind", "power", "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("result.json")).unwrap())
            .unwrap();
    assert_eq!(json["kind"], "power");
    let diag = &json["power_diagnostics"];
    assert!(diag["separation"].as_f64().unwrap() > 0.0);
    assert!(diag["theta_star"][0].as_f64().unwrap() > 0.0);
    let _ = std::fs::remove_dir_all(&dir);
}
