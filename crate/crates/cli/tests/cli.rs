use std::path::Path;
use std::process::{Command, Output};

fn gbart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbart"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gbart(args);
    assert!(
        out.status.success(),
        "gbart {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_fit_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    let draws = dir.path().join("draws.jsonl");
    let pred = dir.path().join("pred.csv");
    ok(&["synth", "--regime", "step", "--n", "150", "--q", "2", "--seed", "3", "--out", s(&train)]);
    ok(&["synth", "--regime", "step", "--n", "20", "--q", "2", "--seed", "3", "--out", s(&test)]);

    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("train.truth.json")).unwrap()).unwrap();
    assert_eq!(truth["step_complexity"], 4);
    assert_eq!(std::fs::read_to_string(&train).unwrap().lines().next().unwrap(), "x1,x2,y");

    ok(&[
        "fit", "--data", s(&train), "--trees", "5", "--iters", "300", "--burnin", "100", "--thin", "10", "--out", s(&draws),
    ]);
    let lines: Vec<String> = std::fs::read_to_string(&draws).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 1 + 20);
    let header: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(header["header"]["n"], 150);

    ok(&["predict", "--draws", s(&draws), "--data", s(&test), "--out", s(&pred)]);
    let text = std::fs::read_to_string(&pred).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "f_mean,f_q025,f_q975,response_mean");
    let rows: Vec<Vec<f64>> = rows.map(|r| r.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 20);
    for r in &rows {
        assert!(r[1] <= r[0] && r[0] <= r[2], "{r:?}");
        assert!((r[0] - r[3]).abs() < 1e-12, "gaussian response mean equals f: {r:?}");
    }
}

#[test]
fn same_seed_same_draws() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["synth", "--regime", "monotone", "--n", "60", "--likelihood", "poisson", "--link", "softplus", "--out", s(&data)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "fit", "--data", s(&data), "--likelihood", "poisson", "--link", "softplus", "--trees", "3", "--iters", "120",
            "--burnin", "20", "--thin", "10", "--seed", "9", "--out", s(&out),
        ]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.jsonl"), run("b.jsonl"));
}

#[test]
fn multinomial_labels_are_one_hot_encoded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("m.csv");
    let mut csv = String::from("x1,y\n");
    for i in 0..60 {
        csv.push_str(&format!("{},{}\n", i as f64 / 60.0, i * 3 / 60));
    }
    std::fs::write(&data, csv).unwrap();
    let draws = dir.path().join("m.jsonl");
    ok(&[
        "fit", "--data", s(&data), "--likelihood", "multinomial", "--classes", "3", "--trees", "2", "--iters", "60",
        "--burnin", "10", "--thin", "10", "--out", s(&draws),
    ]);
    let stdout = ok(&["predict", "--draws", s(&draws), "--data", s(&data)]);
    let header = stdout.lines().next().unwrap();
    assert!(header.starts_with("f_mean_1,"), "{header}");
    assert!(header.contains("response_mean_3"), "{header}");
}

#[test]
fn experiment_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    std::fs::write(
        &cfg,
        "name = tiny\nregime = step\nk0 = 2\nq = 1\nn_grid = 40, 60, 80, 100\nreplicates = 2\ntrees = 2\niters = 150\nburnin = 50\nthin = 5\nsave_draws = false\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&["experiment", "--config", s(&cfg), "--out", s(&out)]);
    for f in ["config.conf", "report.csv", "slopes.csv", "grid.csv", "truth.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["name"], "tiny");
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 8);
}

#[test]
fn verify_prior_reports_failure_for_beta() {
    let stdout = ok(&["verify-prior", "--dist", "gaussian", "--p", "2"]);
    assert!(stdout.starts_with("certificate,t,probability,envelope,ratio,passes"));
    let beta = ok(&["verify-prior", "--dist", "beta22"]);
    assert!(beta.lines().any(|l| l.starts_with("lower,") && l.ends_with(",false")), "{beta}");
}

#[test]
fn bad_input_is_an_error() {
    let out = gbart(&["synth", "--regime", "step", "--n", "10", "--likelihood", "poisson", "--link", "cubic", "--out", "/tmp/never.csv"]);
    assert!(!out.status.success());
    let out = gbart(&["experiment", "--config", "/nonexistent.conf", "--out", "/tmp/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.conf"));
}
