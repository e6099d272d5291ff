use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hal-density"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Draws `n` points from a reference DGP into `dir/name`.
fn sample(dir: &TempDir, name: &str, dgp: &str, n: usize) -> PathBuf {
    let p = path(dir, name);
    ok(&["sample", "--dgp", dgp, "--n", &n.to_string(), "--seed", "7", "--out", s(&p)]);
    p
}

fn uniform_data(dir: &TempDir, n: usize) -> PathBuf {
    let p = path(dir, "uniform.txt");
    let text: String = (0..n).map(|i| format!("{}\n", (i as f64 + 0.5) / n as f64)).collect();
    fs::write(&p, text).unwrap();
    p
}

fn mean(data: &Path) -> f64 {
    let v: Vec<f64> = fs::read_to_string(data).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn fit_with_cv_on_uniform_data_is_flat() {
    let dir = TempDir::new().unwrap();
    let data = uniform_data(&dir, 200);
    let model = path(&dir, "model.json");
    let summary = ok(&["fit", s(&data), "--cv", "--order", "1", "--out", s(&model)]);
    assert!(summary.contains("n=200"), "{summary}");
    let csv = ok(&["eval", s(&model), "--at", "0.1,0.5,0.9"]);
    for line in csv.lines().skip(1) {
        let d: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((d - 1.0).abs() < 0.1, "{line}");
    }
}

#[test]
fn huge_lambda_leaves_no_active_knots() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "tn.txt", "TN", 100);
    let model = path(&dir, "model.json");
    let summary = ok(&["fit", s(&data), "--lambda", "1e6", "--order", "2", "--out", s(&model)]);
    assert!(summary.contains("active_knots=0"), "{summary}");
    let at = ok(&["eval", s(&model), "--at", "0.5"]);
    assert_eq!(at.lines().collect::<Vec<_>>(), vec!["x,density", "0.5,1"]);
}

#[test]
fn eval_grid_and_band_schema() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "tn.txt", "TN", 150);
    let model = path(&dir, "model.json");
    ok(&["fit", s(&data), "--order", "2", "--lambda", "2", "--out", s(&model)]);

    let plain = ok(&["eval", s(&model)]);
    assert_eq!(plain.lines().next().unwrap(), "x,density");
    assert_eq!(plain.lines().count(), 202);

    let band = path(&dir, "band.csv");
    ok(&["eval", s(&model), "--ci", "--data", s(&data), "--grid-points", "51", "--out", s(&band)]);
    let text = fs::read_to_string(&band).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,density,se,lo,hi");
    assert_eq!(text.lines().count(), 52);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[3] <= v[1] && v[1] <= v[4] && v[2] >= 0.0, "{line}");
    }
    // --ci without the sample is a usage error.
    assert_eq!(code(&["eval", s(&model), "--ci"]), 2);
}

#[test]
fn target_matches_empirical_quantities() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "ga3.txt", "GA3", 200);
    let model = path(&dir, "model.json");
    ok(&["fit", s(&data), "--order", "1", "--lambda", "1", "--out", s(&model)]);

    let report = json(&ok(&["target", s(&model), s(&data), "--estimand", "mean"]));
    assert_eq!(report["kind"], "moment");
    assert!((report["tmle"].as_f64().unwrap() - mean(&data)).abs() < 1e-8);

    let values: Vec<f64> = fs::read_to_string(&data).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    let frac = values.iter().filter(|&&x| x > 0.5).count() as f64 / values.len() as f64;
    let out = path(&dir, "surv.json");
    ok(&[
        "target", s(&model), s(&data), "--estimand", "survival:0.5", "--min-steps", "1", "--out", s(&out),
    ]);
    let report = json(&fs::read_to_string(&out).unwrap());
    assert!((report["tmle"].as_f64().unwrap() - frac).abs() < 1e-8);
    let ci = report["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() < ci[1].as_f64().unwrap());

    assert_eq!(code(&["target", s(&model), s(&data), "--estimand", "mode"]), 2);
    assert_eq!(code(&["target", s(&model), s(&data), "--estimand", "survival:abc"]), 2);
}

#[test]
fn trend_filter_subcommand() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "step.txt", "step", 120);
    let out = path(&dir, "tf.csv");
    let line = ok(&["tf", s(&data), "--order", "0", "--lambda", "0.5", "--out", s(&out)]);
    assert!(line.contains("bins=121"), "{line}");
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "bin_left,bin_right,count,theta,density");
    assert_eq!(text.lines().count(), 122);

    let small = ok(&["tf", s(&data), "--order", "1", "--lambda", "1e6", "--bins", "20"]);
    assert_eq!(small.lines().count(), 21);
    assert_eq!(code(&["tf", s(&data), "--order", "3", "--lambda", "1"]), 2);
}

#[test]
fn seeds_make_runs_reproducible() {
    let a = ok(&["sample", "--dgp", "sinusoidal", "--n", "20", "--seed", "3"]);
    let b = ok(&["sample", "--dgp", "sinusoidal", "--n", "20", "--seed", "3"]);
    let c = ok(&["sample", "--dgp", "sinusoidal", "--n", "20", "--seed", "4"]);
    assert_eq!(a, b);
    assert_ne!(a, c);

    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "tn.txt", "TN", 80);
    let fit = |seed: &str| ok(&["fit", s(&data), "--cv", "--order", "1", "--seed", seed]);
    assert_eq!(fit("5"), fit("5"));
}

#[test]
fn csv_input_with_column() {
    let dir = TempDir::new().unwrap();
    let p = path(&dir, "data.csv");
    let rows: String = (0..60).map(|i| format!("{i},{}\n", (i as f64 * 0.37) % 1.0)).collect();
    fs::write(&p, format!("id,x\n{rows}")).unwrap();
    let summary = ok(&["fit", s(&p), "--col", "x", "--lambda", "5", "--out", s(&path(&dir, "m.json"))]);
    assert!(summary.contains("n=60"));
    assert_eq!(code(&["fit", s(&p), "--col", "y", "--lambda", "5"]), 2);
}

#[test]
fn simulate_runs_a_small_plan_deterministically() {
    let dir = TempDir::new().unwrap();
    let plan = path(&dir, "plan.json");
    fs::write(
        &plan,
        r#"{
            "dgps": ["TN"],
            "sample_sizes": [50],
            "replicates": 1,
            "experiments": ["uniform_convergence", "efficiency"],
            "grid_points": 21,
            "cv": {"lambda_grid": [10.0, 1.0, 0.1], "orders": [1], "max_knots": 10}
        }"#,
    )
    .unwrap();
    let (a, b) = (path(&dir, "a"), path(&dir, "b"));
    ok(&["simulate", s(&plan), "--out-dir", s(&a)]);
    ok(&["simulate", s(&plan), "--out-dir", s(&b)]);
    for name in ["uniform_errors.csv", "uniform_summary.csv", "efficiency.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest = json(&fs::read_to_string(a.join("manifest.json")).unwrap());
    assert_eq!(manifest["master_seed"], 42);
    assert!(manifest["version"].as_str().is_some_and(|v| !v.is_empty()));

    let bad = path(&dir, "bad.json");
    fs::write(&bad, r#"{"dgps": ["cauchy"]}"#).unwrap();
    assert_eq!(code(&["simulate", s(&bad)]), 2);
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    assert_eq!(code(&["fit", "/nonexistent/data.txt", "--lambda", "1"]), 2);
    assert_eq!(code(&["fit", "x.txt", "--bogus"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["fit", "x.txt", "--lambda", "1", "--cv"]), 2);

    let dir = TempDir::new().unwrap();
    let p = path(&dir, "bad.txt");
    fs::write(&p, "0.5\n1.5\n").unwrap();
    assert_eq!(code(&["fit", s(&p), "--lambda", "1"]), 2);
}

#[test]
fn numerical_failure_exits_with_one() {
    // No observation lies below 0.01, so targeting would have to drive the
    // fitted CDF there to zero, which no finite fluctuation does.
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "gs5.txt", "GS5", 100);
    let model = path(&dir, "model.json");
    ok(&["fit", s(&data), "--order", "1", "--lambda", "1", "--out", s(&model)]);
    assert_eq!(
        code(&["target", s(&model), s(&data), "--estimand", "cdf:0.01", "--min-steps", "1"]),
        1
    );
}
