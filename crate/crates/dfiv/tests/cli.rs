use std::path::Path;
use std::process::{Command, Output};

fn dfiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfiv"))
        .args(args)
        .output()
        .unwrap()
}

fn write_spec(dir: &Path, text: &str) -> String {
    let p = dir.join("spec.txt");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn without_wall_time(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("wall_time_s"))
        .collect::<Vec<_>>()
        .join("\n")
}

const QUICK: &str =
    "task = demand\nn = 300\nepochs = 3\nbatch_m = 100\nbatch_n = 100\nrepeats = 1\nseed = 4\n";

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUICK);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = dfiv(&["run", &spec, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(without_wall_time(&a), without_wall_time(&b));
    let loaded = dfiv::harness::RunOutput::load(&a).unwrap();
    assert_eq!(loaded.records[0].repeats.len(), 1);
}

#[test]
fn stdout_carries_the_result_without_an_output_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUICK);
    let o = dfiv(&[
        "run",
        &spec,
        "--set",
        "estimator=linear_2sls",
        "--repeats",
        "2",
    ]);
    assert!(o.status.success());
    let out = dfiv::harness::RunOutput::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(out.records[0].estimator, "linear_2sls");
    assert_eq!(out.records[0].seeds, vec![4, 5]);
}

#[test]
fn invalid_specs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        "task = demand\nestimator = dfiv_obs\n",
        "task = nothing\n",
        "task = demand\nrho = 1.5\n",
        "task = demand\nunknown_key = 1\n",
    ];
    for text in bad {
        let spec = write_spec(dir.path(), text);
        assert_eq!(dfiv(&["run", &spec]).status.code(), Some(2), "{text}");
    }
    assert_eq!(dfiv(&["run", "/nonexistent/spec"]).status.code(), Some(2));
    let spec = write_spec(dir.path(), QUICK);
    assert_eq!(
        dfiv(&["run", &spec, "--set", "no-equals"]).status.code(),
        Some(2)
    );
}

#[test]
fn run_fails_when_every_repeat_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &format!("{QUICK}lr = 1e300\n"));
    let o = dfiv(&["run", &spec]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gen_writes_data_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demand.csv");
    let o = dfiv(&[
        "gen",
        "demand",
        "--seed",
        "3",
        "--n",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = std::fs::read_to_string(&out).unwrap();
    assert!(data.starts_with("stage,y,p,t,s,c"));
    assert_eq!(data.lines().count(), 51);
    assert!(dir.path().join("demand.truth.csv").exists());
}

#[test]
fn tune_reports_selected_lambdas() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!("{QUICK}n_holdout = 100\ngrid = 0.01, 1\n"),
    );
    let o = dfiv(&["tune", &spec]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(t["lambda1"].is_f64() && t["lambda2"].is_f64());
}

#[test]
fn ablate_records_both_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUICK);
    let o = dfiv(&["ablate", &spec]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dfiv::harness::RunOutput::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let r = &out.records[0].repeats[0];
    assert!(r.extra.contains_key("dfiv_test_mse"));
    assert!(r.joint.is_some());
}
