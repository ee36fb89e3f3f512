//! End-to-end checks of the `fvtest` binary: exit codes, report
//! reproducibility, manifests, and the dry-run path.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fvtest")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn fvtest")
}

fn write_linear_csv(path: &Path, n: usize, seed: u64) {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("y,x\n");
    for _ in 0..n {
        let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let noise: f64 = rng.sample(rand_distr::StandardNormal);
        text.push_str(&format!("{},{}\n", 0.5 * x + noise, x));
    }
    std::fs::write(path, text).unwrap();
}

fn strip_timestamp(report: &str) -> String {
    report
        .lines()
        .filter(|line| !line.contains("generated_at_unix"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn test_command_writes_deterministic_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_linear_csv(&csv, 200, 5);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "test",
            "--input",
            csv.to_str().unwrap(),
            "--schema",
            "outcome=y,conditioning=x",
            "--estimand",
            "cond_mean",
            "--class",
            "aggregate",
            "--D",
            "20",
            "--K",
            "6",
            "--B",
            "120",
            "--seed",
            "99",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{output:?}");
    }
    let a = std::fs::read_to_string(out_a.join("report.json")).unwrap();
    let b = std::fs::read_to_string(out_b.join("report.json")).unwrap();
    assert_eq!(strip_timestamp(&a), strip_timestamp(&b));

    let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(parsed["n"], 200);
    assert!(parsed["headline_p"].as_f64().unwrap() > 0.0);
    assert!(parsed["aggregate"]["p_aggregate"].as_f64().unwrap() <= 1.0);
    assert!(parsed["p_cauchy"].as_f64().is_some());
    assert_eq!(parsed["classes"].as_array().unwrap().len(), 7);
}

#[test]
fn test_command_missing_outcome_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_linear_csv(&csv, 50, 6);
    let output = run(&[
        "test",
        "--input",
        csv.to_str().unwrap(),
        "--schema",
        "conditioning=x",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn test_command_missing_column_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_linear_csv(&csv, 50, 6);
    let output = run(&[
        "test",
        "--input",
        csv.to_str().unwrap(),
        "--schema",
        "outcome=z,conditioning=x",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("missing column"), "{stderr}");
}

#[test]
fn test_command_constant_conditioning_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    let mut text = String::from("y,x\n");
    for i in 0..60 {
        text.push_str(&format!("{},1.0\n", i as f64));
    }
    std::fs::write(&csv, text).unwrap();
    let output = run(&[
        "test",
        "--input",
        csv.to_str().unwrap(),
        "--schema",
        "outcome=y,conditioning=x",
        "--class",
        "aggregate",
        "--B",
        "50",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("constant"), "{stderr}");
}

#[test]
fn simulate_one_cell_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "simulate",
        "--example",
        "ex1",
        "--settings",
        "2",
        "--n",
        "125",
        "--reps",
        "2",
        "--B",
        "40",
        "--D",
        "12",
        "--K",
        "4",
        "--seed",
        "5",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let csv = std::fs::read_to_string(out.join("rejections.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,example,setting,n,alpha,n_reps,rejection_rate,mc_stderr"
    );
    assert_eq!(lines.len(), 6, "5 methods after the header: {csv}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["master_seed"], 5);
    assert_eq!(manifest["rows"].as_array().unwrap().len(), 5);
    assert!(manifest["rows"][0]["wall_time"].as_f64().unwrap() >= 0.0);
}

#[test]
fn simulate_invalid_setting_is_exit_2_before_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "simulate",
        "--example",
        "ex1",
        "--settings",
        "7",
        "--n",
        "125",
        "--reps",
        "2",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
    assert!(!out.join("rejections.csv").exists());
}

#[test]
fn simulate_dry_run_prints_task_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "simulate",
        "--profile",
        "full",
        "--reps",
        "500",
        "--dry-run",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    // 3 examples x 3 settings x 5 sizes x 500 reps.
    assert!(stdout.contains("45 cells"), "{stdout}");
    assert!(stdout.contains("22500 pipeline runs"), "{stdout}");
    assert!(!out.join("rejections.csv").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = Command::new(bin())
        .env("FVTEST_SEED", "31415")
        .args([
            "simulate",
            "--example",
            "ex1",
            "--settings",
            "1",
            "--n",
            "125",
            "--reps",
            "1",
            "--B",
            "20",
            "--D",
            "8",
            "--K",
            "3",
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["master_seed"], 31415);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_linear_csv(&csv, 80, 8);
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "input={}\nschema=outcome=y,conditioning=x\nclass=indicator\nB=30\nseed=4\nout-dir={}\n",
            csv.display(),
            dir.path().join("out").display()
        ),
    )
    .unwrap();
    let output = run(&["test", "--config", conf.to_str().unwrap()]);
    assert!(output.status.success(), "{output:?}");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out").join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["class"], "indicator");
    assert_eq!(report["bootstrap_replicates"], 30);
}
