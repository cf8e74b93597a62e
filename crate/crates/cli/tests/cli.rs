use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msis"))
        .current_dir(dir)
        .env_remove("MSIS_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_is_deterministic_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = msis(dir.path(), &["simulate", "--n", "1500", "--run-dir", name]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["examples.csv", "counterfactuals.csv", "manifest.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["artifacts"]["examples.csv"].is_string());
}

#[test]
fn fresh_run_directories_land_under_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = msis(dir.path(), &["simulate", "--n", "500", "--out", "runs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    assert!(name.contains("-simulate-"), "{name}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(msis(dir.path(), &["--bogus"]).status.code(), Some(2));
    assert_eq!(msis(dir.path(), &["sweep", "--param", "width"]).status.code(), Some(2));
    assert_eq!(msis(dir.path(), &["evaluate"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_1_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = msis(dir.path(), &["simulate", "--set", "sim.acceptance_rate=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sim.acceptance_rate"), "{}", stderr(&o));

    fs::write(dir.path().join("c.json"), r#"{"train": {"batch_size": "big"}}"#).unwrap();
    let o = msis(dir.path(), &["train", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));

    let o = msis(dir.path(), &["train", "--set", "model.input_dim=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.input_dim"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = msis(dir.path(), &["gradcheck", "--n", "1000", "--seeds", "1", "--run-dir", "g"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",true"), "{csv}");
}

#[test]
fn sweep_over_d_has_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = msis(
        dir.path(),
        &["sweep", "--param", "d", "--n", "1500", "--epochs", "2", "--set", "train.patience=1", "--seeds", "1,2", "--run-dir", "s"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("s/sweep_d.csv")).unwrap();
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(values, ["2", "4", "8", "16", "24"]);
    assert!(dir.path().join("s/sweep_d.dat").exists());
}

#[test]
fn train_then_evaluate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = msis(dir.path(), &["simulate", "--n", "1500", "--run-dir", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let common = ["--data", "data", "--epochs", "2", "--set", "train.patience=1", "--seeds", "1,2"];

    let mut args = vec!["train", "--run-dir", "t"];
    args.extend(common);
    let o = msis(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = dir.path().join("t");
    for f in ["runs.csv", "report_full_population.csv", "report_observed_only.txt", "checkpoints/msis/seed1.ckpt"] {
        assert!(t.join(f).exists(), "missing {f}");
    }
    let report = fs::read_to_string(t.join("report_full_population.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("msis,mob6,")), "{report}");

    let mut args = vec!["evaluate", "--checkpoint", "t/checkpoints/msis/seed1.ckpt", "--run-dir", "e"];
    args.extend(common);
    let o = msis(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    // Header plus six targets in each of two scopes.
    assert_eq!(metrics.lines().count(), 1 + 12, "{metrics}");

    let o = msis(
        dir.path(),
        &["report", "--input", "t/runs.csv", "--scope", "observed-only", "--run-dir", "r"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read_to_string(dir.path().join("r/report.csv")).unwrap();
    let b = fs::read_to_string(t.join("report_observed_only.csv")).unwrap();
    assert_eq!(a, b);
}
