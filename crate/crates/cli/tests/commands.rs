use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn rsbench(config: &Path, out: &Path, args: &[&str]) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_rsbench"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Run config in `dir` pointing at a bundled model, with extra fields merged in.
fn run_config(dir: &Path, model: &str, extra: Value) -> PathBuf {
    let mut cfg = json!({ "model": configs().join(model), "seed": 5 });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn solve_scalar_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = rsbench(&configs().join("scalar/run.json"), &out, &["solve"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let summary = read_json(&out.join("residual_summary.json"));
    assert_eq!(summary["passed"], true);
    assert!(summary["max_residual"].as_f64().unwrap() < 1e-6);
    let coeffs = read_json(&out.join("value_coefficients.json"));
    assert_eq!(coeffs["grid"].as_array().unwrap().len(), 1261);
    let manifest = read_json(&out.join("manifest.json"));
    let files: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    assert_eq!(files, ["residual_summary.json", "value_coefficients.json"]);
}

#[test]
fn zero_factor_loading_gives_zero_quadratic_terms() {
    let dir = tempfile::tempdir().unwrap();
    let model = json!({
        "n": 1, "m": 1, "d": 2, "theta": 1.0, "horizon_years": 2.0, "x0": [0.3],
        "constant": {
            "a": [0.05], "A": [[0.0]], "Sigma": [[0.2, 0.0]],
            "b": [0.0], "B": [[-1.0]], "Lambda": [[0.0, 0.1]],
            "c": 0.0, "C": [0.0], "Xi": [0.0, 0.0]
        }
    });
    std::fs::write(dir.path().join("model.json"), model.to_string()).unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"model": "model.json"}"#).unwrap();
    let out = dir.path().join("out");
    let run = rsbench(&cfg, &out, &["solve"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let vc = rsbench_core::ValueCoefficients::load(out.join("value_coefficients.json")).unwrap();
    assert!(vc.q_mat.iter().all(|q| q.iter().all(|v| *v == 0.0)));
    assert!(vc.q_vec.iter().all(|q| q.iter().all(|v| *v == 0.0)));
    // k alone carries the constant growth rate
    assert!(vc.k[0] > 0.0);
}

#[test]
fn missing_model_file_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"model": "nowhere.json"}"#).unwrap();
    let run = rsbench(&cfg, &dir.path().join("out"), &["solve"]);
    assert_eq!(run.code, 1);
    let line = run
        .stderr
        .lines()
        .find(|l| l.starts_with("ERROR "))
        .expect("error line");
    assert!(line.contains("nowhere.json"), "{line}");
}

#[test]
fn bad_strategy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path(), "two_asset/model.json", json!({}));
    let run = rsbench(
        &cfg,
        &dir.path().join("out"),
        &["simulate", "--paths", "4", "--strategy", "lucky"],
    );
    assert_eq!(run.code, 1);
    assert!(run.stderr.starts_with("ERROR "), "{}", run.stderr);
}

#[test]
fn experiment_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(
        dir.path(),
        "two_asset/model.json",
        json!({ "simulation": { "paths": 300, "antithetic": true } }),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let one = rsbench(&cfg, &a, &["--threads", "1", "experiment"]);
    let many = rsbench(&cfg, &b, &["--threads", "4", "experiment"]);
    assert_eq!(one.code, 0, "{}", one.stderr);
    assert_eq!(many.code, 0, "{}", many.stderr);
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
    let report = read_json(&a.join("experiment.json"));
    assert_eq!(report["kn_feed_max_diff"], 0.0);
    assert_eq!(report["kn_feed_identical_returns"], true);
    let table = std::fs::read_to_string(a.join("experiment_table.txt")).unwrap();
    assert!(table.contains("Portfolio (KN)") && table.contains("Portfolio (FEED)"));
}

#[test]
fn single_path_experiment_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(
        dir.path(),
        "two_asset/model.json",
        json!({ "simulation": { "paths": 1 } }),
    );
    let run = rsbench(&cfg, &dir.path().join("out"), &["experiment"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stderr.contains("WARNING"), "{}", run.stderr);
}

#[test]
fn kelly_mode_experiment_has_matching_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = run_config(
        dir.path(),
        "two_asset/model.json",
        json!({ "theta": 0.0, "simulation": { "paths": 200 } }),
    );
    let run = rsbench(&cfg, &out, &["experiment"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let report = read_json(&out.join("experiment.json"));
    let reports = report["reports"].as_array().unwrap();
    let get = |name: &str| reports.iter().find(|r| r["name"] == name).unwrap()["report"].clone();
    assert_eq!(get("Kelly"), get("Portfolio (FEED)"));
}

#[test]
fn simulate_writes_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = run_config(dir.path(), "scalar/model.json", json!({}));
    let run = rsbench(
        &cfg,
        &out,
        &[
            "simulate",
            "--paths",
            "6",
            "--steps",
            "20",
            "--antithetic",
            "--record-paths",
        ],
    );
    assert_eq!(run.code, 0, "{}", run.stderr);
    let terminal = std::fs::read_to_string(out.join("terminal.csv")).unwrap();
    assert_eq!(terminal.lines().count(), 7);
    let returns = std::fs::read_to_string(out.join("returns.csv")).unwrap();
    assert_eq!(
        returns.lines().next().unwrap(),
        "path,step,log_return,benchmark_log_return"
    );
    assert_eq!(returns.lines().count(), 1 + 6 * 20);
    let (paths, steps, n, xs, rs) = rsbench_core::simulate::read_path_dump(out.join("paths.bin")).unwrap();
    assert_eq!((paths, steps, n), (6, 20, 1));
    assert_eq!(xs.len(), 6 * 21);
    assert!(rs.iter().step_by(21).all(|r| *r == 0.0));
    let summary = read_json(&out.join("simulation.json"));
    assert_eq!(summary["paths"], 6);

    let report = rsbench(&cfg, &out, &["report"]);
    assert_eq!(report.code, 0, "{}", report.stderr);
    assert!(out.join("report_table.csv").exists());
}

#[test]
fn verify_scalar_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = run_config(
        dir.path(),
        "scalar/model.json",
        json!({ "verify": { "points": 20, "saddle_probes": 2000, "paths": 1000 } }),
    );
    let run = rsbench(&cfg, &out, &["verify"]);
    assert_eq!(run.code, 0, "{}\n{}", run.stdout, run.stderr);
    assert!(!run.stdout.contains("FAIL"));
    assert_eq!(read_json(&out.join("verify.json"))["passed"], true);
}

#[test]
fn corrupted_q_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = run_config(
        dir.path(),
        "scalar/model.json",
        json!({ "verify": { "points": 10, "saddle_probes": 500, "paths": 200 } }),
    );
    let run = rsbench(&cfg, &out, &["verify", "--inject-fault", "corrupt-q"]);
    assert_eq!(run.code, 2);
    let line = run
        .stderr
        .lines()
        .find(|l| l.starts_with("ERROR VerificationFailure:"))
        .expect("error line");
    assert!(line.contains("riccati_residual"), "{line}");
    // artifacts of the failed run are still listed
    assert!(out.join("manifest.json").exists());
}

#[test]
fn kelly_mode_verify_skips_game_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = run_config(
        dir.path(),
        "two_asset/model.json",
        json!({ "theta": 0.0, "verify": { "points": 10, "paths": 200 } }),
    );
    let run = rsbench(&cfg, &out, &["verify"]);
    assert_eq!(run.code, 0, "{}\n{}", run.stdout, run.stderr);
    let skipped: Vec<&str> = run.stdout.lines().filter(|l| l.starts_with("SKIP")).collect();
    assert_eq!(skipped.len(), 3);
    assert!(skipped.iter().all(|l| l.contains("Kelly mode")));
}

#[test]
fn policy_reports_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = run_config(dir.path(), "two_asset/model.json", json!({}));
    let run = rsbench(&cfg, &out, &["policy", "--t", "0.5", "--x", "0.2"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let policy = read_json(&out.join("policy.json"));
    let text = policy.to_string();
    for key in ["h_star", "gamma_star", "kelly", "bench_track", "ihp"] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
}

#[test]
fn estimate_from_panel_then_solve() {
    use nalgebra::DVector;
    use rsbench_core::estimate::{synthetic_panel, write_panel};
    use rsbench_core::ModelSpec;

    let dir = tempfile::tempdir().unwrap();
    let truth = ModelSpec::from_path(configs().join("two_asset/model.json"))
        .unwrap()
        .validate()
        .unwrap();
    let w = DVector::from_vec(vec![0.9, 0.1]);
    let panel = synthetic_panel(&truth, 1500, 1.0 / 252.0, &w, 3).unwrap();
    write_panel(&panel, dir.path().join("panel.csv")).unwrap();
    let cfg = dir.path().join("run.json");
    let run_cfg = json!({
        "estimation": {
            "panel": "panel.csv",
            "benchmark_weights": [0.9, 0.1],
            "bootstrap_resamples": 50
        },
        "theta": 2.0,
        "horizon_years": 1.0
    });
    std::fs::write(&cfg, run_cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    let run = rsbench(&cfg, &out, &["estimate"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let report = read_json(&out.join("estimation_report.json"));
    assert_eq!(report["observations"], 1500);
    assert_eq!(report["bootstrap"]["resamples"], 50);
    let fitted = ModelSpec::from_path(out.join("model.json"))
        .unwrap()
        .validate()
        .unwrap();
    assert_eq!((fitted.m(), fitted.n(), fitted.d()), (2, 1, 4));

    let solved = rsbench(&cfg, &out, &["solve"]);
    assert_eq!(solved.code, 0, "{}", solved.stderr);
}
