mod common;

use std::path::Path;

use common::example_path;
use mfe_core::cli::{run, EXIT_INPUT, EXIT_OK, EXIT_VIOLATIONS};

fn solve(model: &str, grid: usize, out: &Path, extra: &[&str]) -> i32 {
    let model = example_path(model);
    let mut args = vec![
        "mfe".to_string(),
        "solve".into(),
        "--model".into(),
        model.display().to_string(),
        "--grid".into(),
        grid.to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    run(args)
}

fn verify(dir: &Path) -> i32 {
    run(["mfe", "verify", "--eq", &dir.display().to_string()])
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn equilibrium_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(&dir.join("equilibrium.json"))).unwrap()
}

#[test]
fn every_shipped_example_round_trips() {
    for name in [
        "affine_mv.json",
        "affine_mv_gtilde.json",
        "three_state.json",
        "dist_independent.json",
        "zero_cost.json",
    ] {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(solve(name, 60, dir.path(), &[]), EXIT_OK, "{name}");
        for f in ["equilibrium.json", "flow.csv", "policy.csv", "theta_diag.csv"] {
            assert!(dir.path().join(f).exists(), "{name}: {f}");
        }
        assert_eq!(verify(dir.path()), EXIT_OK, "{name}");
        assert!(dir.path().join("spike_report.csv").exists());
    }
}

#[test]
fn csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("three_state.json", 10, dir.path(), &[]), EXIT_OK);
    let flow = read(&dir.path().join("flow.csv"));
    assert!(!flow.contains('\r'));
    let lines: Vec<&str> = flow.lines().collect();
    assert_eq!(lines[0], "t,nu_1,nu_2,nu_3");
    assert_eq!(lines.len(), 12);
    let policy = read(&dir.path().join("policy.csv"));
    assert_eq!(policy.lines().count(), 11);
    assert_eq!(policy.lines().next().unwrap(), "t,pi_1,pi_2,pi_3");
    let last: Vec<f64> = lines[11].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[0], 1.0);
    assert!((last[1..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let cell = lines[5].split(',').nth(1).unwrap();
    let mantissa = cell.split('e').next().unwrap().replace(['-', '.'], "");
    assert_eq!(mantissa.len(), 17);
}

#[test]
fn zero_cost_theta_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("zero_cost.json", 20, dir.path(), &[]), EXIT_OK);
    for line in read(&dir.path().join("theta_diag.csv")).lines().skip(1) {
        for x in line.split(',').skip(1) {
            assert_eq!(x.parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn distribution_independent_converges_at_iteration_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("dist_independent.json", 40, dir.path(), &[]), EXIT_OK);
    let eq = equilibrium_json(dir.path());
    assert_eq!(eq["diagnostics"]["iterations"], 2);
    assert_eq!(eq["diagnostics"]["status"], "converged");
}

#[test]
fn shipped_contractive_example_converges_quickly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("affine_mv.json", 200, dir.path(), &[]), EXIT_OK);
    let eq = equilibrium_json(dir.path());
    assert!(eq["diagnostics"]["iterations"].as_u64().unwrap() <= 50);
    assert_eq!(eq["contraction"]["verdict"], "contractive");
    assert_eq!(eq["model_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn non_convergence_exits_two_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let code = solve("affine_mv.json", 40, dir.path(), &["--max-iter", "2", "--tol", "1e-14"]);
    assert_eq!(code, 2);
    let eq = equilibrium_json(dir.path());
    assert_eq!(eq["converged"], false);
    assert!(dir.path().join("flow.csv").exists());
}

#[test]
fn init_rho_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("affine_mv.json", 20, dir.path(), &["--init-rho", "0.3,0.7"]), EXIT_OK);
    assert_eq!(equilibrium_json(dir.path())["initial"][0], 0.3);
    assert_eq!(solve("affine_mv.json", 20, dir.path(), &["--init-rho", "0.3,0.3,0.4"]), EXIT_INPUT);
    assert_eq!(solve("affine_mv.json", 20, dir.path(), &["--init-rho", "a,b"]), EXIT_INPUT);
}

#[test]
fn schema_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.json");
    std::fs::write(&model, "{\n  \"schema\": 1,\n  \"states\": \"two\"\n}\n").unwrap();
    let code = run([
        "mfe", "solve", "--model", &model.display().to_string(), "--grid", "10", "--out",
        &dir.path().join("out").display().to_string(),
    ]);
    assert_eq!(code, EXIT_INPUT);
    let err = mfe_core::Scenario::load(&model).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("states"), "{err}");
    assert_eq!(run(["mfe", "solve", "--grid", "10"]), EXIT_INPUT);
}

#[test]
fn corrupted_policy_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("three_state.json", 50, dir.path(), &[]), EXIT_OK);
    let path = dir.path().join("policy.csv");
    let text = read(&path);
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[11].split(',').map(String::from).collect();
    let v: f64 = cells[1].parse().unwrap();
    cells[1] = format!("{:.16e}", if v > 0.0 { v - 0.6 } else { v + 0.6 });
    lines[11] = cells.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert_eq!(verify(dir.path()), EXIT_VIOLATIONS);
    let summary: serde_json::Value = serde_json::from_str(&read(&dir.path().join("verify_summary.json"))).unwrap();
    assert!(summary["violations"].as_u64().unwrap() >= 1);
}

#[test]
fn verify_rejects_missing_or_tampered_directories() {
    assert_eq!(verify(Path::new("/nonexistent/equilibrium")), EXIT_INPUT);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("affine_mv.json", 20, dir.path(), &[]), EXIT_OK);
    let path = dir.path().join("equilibrium.json");
    let mut eq = equilibrium_json(dir.path());
    eq["model"]["horizon"] = serde_json::json!(2.0);
    std::fs::write(&path, serde_json::to_string(&eq).unwrap()).unwrap();
    assert_eq!(verify(dir.path()), EXIT_INPUT);
}

#[test]
fn simulate_requires_two_players() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(solve("affine_mv.json", 20, dir.path(), &[]), EXIT_OK);
    let d = dir.path().display().to_string();
    assert_eq!(run(["mfe", "simulate", "--eq", &d, "--players", "1", "--seed", "1"]), EXIT_INPUT);
    assert_eq!(
        run(["mfe", "simulate", "--eq", &d, "--players", "2000", "--seed", "1", "--reps", "3", "--paths", "20"]),
        EXIT_OK
    );
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("sim_report.json"))).unwrap();
    assert_eq!(report["errors"].as_array().unwrap().len(), 3);
    let csv = read(&dir.path().join("empirical_flow.csv"));
    assert_eq!(csv.lines().next().unwrap(), "rep,t,nu_1,nu_2");
    assert_eq!(csv.lines().count(), 1 + 3 * 21);
}
