use std::path::Path;
use std::process::{Command, Output};

fn cnpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnpg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line on stderr");
    serde_json::from_str(line).expect("stderr carries a JSON error")
}

fn generate(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let file = dir.join(name);
    let mut args = vec!["generate", "-o", path(&file)];
    args.extend_from_slice(extra);
    let out = cnpg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    file
}

#[test]
fn generate_writes_a_valid_instance() {
    let dir = tempfile::tempdir().unwrap();
    let features = dir.path().join("phi.json");
    let file = generate(
        dir.path(),
        "cmdp.json",
        &[
            "--states", "10", "--actions", "5", "--constraints", "1", "--gamma", "0.8", "--seed", "42",
            "--feature-dim", "35", "--features-output", path(&features),
        ],
    );
    let c = cnpg_core::Cmdp::load(&file).unwrap();
    assert!(c.validate().is_ok());
    assert_eq!((c.num_states, c.num_actions, c.num_constraints()), (10, 5, 1));
    assert_eq!(c.generator_seed, Some(42));
    let f = cnpg_core::FeatureMap::load(&features).unwrap();
    assert_eq!(f.dim(), 35);
}

#[test]
fn baseline_objective_in_value_range() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--seed", "4"]);
    let out = cnpg(&["baseline", "--cmdp", path(&file), "--kappa", "0"]);
    assert!(out.status.success());
    let sol: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(sol["status"], "optimal");
    let objective = sol["objective"].as_f64().unwrap();
    assert!((0.0..=5.0).contains(&objective), "{objective}");
    assert_eq!(sol["phi"].as_array().unwrap().len(), 50);
}

#[test]
fn infeasible_baseline_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--seed", "4"]);
    let out = cnpg(&["baseline", "--cmdp", path(&file), "--kappa", "4.9"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "runtime");
}

#[test]
fn malformed_cmdp_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--states", "3", "--actions", "2"]);
    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    value["reward"][1][0] = serde_json::json!(1.5);
    std::fs::write(&file, value.to_string()).unwrap();
    let out = cnpg(&["baseline", "--cmdp", path(&file)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("r[1][0]"), "{err}");
}

#[test]
fn unknown_flag_is_rejected() {
    let out = cnpg(&["kappa-calc", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "validation");
}

#[test]
fn kappa_calc_reference_value() {
    let out = cnpg(&[
        "kappa-calc", "--iterations", "10000", "--eta2", "0.01", "--gamma", "0.8", "--constraints", "1",
        "--sigma-lambda", "1",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["kappa"].as_f64().unwrap() - 3100f64.sqrt() / 100.0).abs() < 1e-12);
    assert_eq!(v["clipped"], false);
}

#[test]
fn solve_config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--states", "4", "--actions", "3", "--seed", "3"]);
    let config = dir.path().join("solver.toml");
    std::fs::write(
        &config,
        "iterations = 50\nn_sgd = 20\nn_constraint = 10\neta1 = 0.1\neta2 = 0.1\nkappa = 0.2\nseed = 9\n",
    )
    .unwrap();
    let trace = dir.path().join("trace.csv");
    let out = cnpg(&[
        "solve", "--cmdp", path(&file), "--config", path(&config), "--iterations", "12", "-o", path(&trace),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 13);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("trace.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["iterations"], 12);
    assert_eq!(meta["config"]["n_sgd"], 20);
    assert_eq!(meta["config"]["seed"], 9);
    assert!(meta["version"].is_string());
}

#[test]
fn solve_rejects_unknown_config_keys_and_bad_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--states", "3", "--actions", "2"]);
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "iterations = 5\nn_sgd = 5\nn_constraint = 5\neta1 = 0.1\neta2 = 0.1\nkappa = 0.1\nbogus = 1\n")
        .unwrap();
    let trace = dir.path().join("t.csv");
    let out = cnpg(&["solve", "--cmdp", path(&file), "--config", path(&config), "-o", path(&trace)]);
    assert_eq!(out.status.code(), Some(1));
    let out = cnpg(&["solve", "--cmdp", path(&file), "--kappa", "7", "--iterations", "3", "-o", path(&trace)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!trace.exists());
}

#[test]
fn diverging_sgd_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--states", "3", "--actions", "2"]);
    let trace = dir.path().join("t.csv");
    let out = cnpg(&[
        "solve", "--cmdp", path(&file), "--iterations", "3", "--n-sgd", "5000", "--alpha", "1e6", "-o", path(&trace),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "runtime");
    assert!(err["message"].as_str().unwrap().contains("diverged"), "{err}");
}

#[test]
fn compare_then_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let out = cnpg(&[
        "compare", "--preset", "standard", "--master-seed", "4", "--runs", "2", "--kappa", "0,0.5",
        "--iterations", "20", "--workers", "2", "-o", path(&runs),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("first nonneg"));
    assert_eq!(table.lines().count(), 3);

    let mut traces: Vec<String> = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with(".csv") && p.file_name().unwrap() != "summary.csv")
        .map(|p| p.to_str().unwrap().to_string())
        .collect();
    traces.sort();
    assert_eq!(traces.len(), 4);
    let summary = dir.path().join("again.csv");
    let verdict = dir.path().join("verdict.json");
    let mut args = vec!["aggregate", "-o", path(&summary), "--verdict", path(&verdict)];
    args.extend(traces.iter().map(String::as_str));
    let out = cnpg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(&summary).unwrap(),
        std::fs::read_to_string(runs.join("summary.csv")).unwrap()
    );
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&verdict).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn aggregate_names_the_heterogeneous_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--states", "3", "--actions", "2", "--seed", "1"]);
    for (name, k) in [("a.csv", "5"), ("b.csv", "6")] {
        let out = cnpg(&[
            "solve", "--cmdp", path(&file), "--iterations", k, "--n-sgd", "5", "--n-constraint", "5", "--kappa", "0",
            "-o", path(&dir.path().join(name)),
        ]);
        assert!(out.status.success());
    }
    let out = cnpg(&["aggregate", path(&dir.path().join("a.csv")), path(&dir.path().join("b.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("b.csv"));
}

#[test]
fn kappa_calc_against_instance_and_clipping() {
    let dir = tempfile::tempdir().unwrap();
    let file = generate(dir.path(), "cmdp.json", &["--seed", "4"]);
    let out = cnpg(&[
        "kappa-calc", "--iterations", "10000", "--eta2", "0.01", "--gamma", "0.8", "--sigma-lambda", "1", "--cmdp",
        path(&file),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let margin = v["slater_margin"].as_f64().unwrap();
    assert_eq!(v["below_slater_margin"], v["kappa"].as_f64().unwrap() < margin);

    let out = cnpg(&[
        "kappa-calc", "--iterations", "100", "--eta2", "0.1", "--gamma", "0.8", "--sigma-lambda", "1", "--eps-bias",
        "1e12",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["clipped"], true);
    assert!(v["kappa"].as_f64().unwrap() < 5.0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}
