use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cglearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cglearn"))
        .args(args)
        .env_remove("CGLEARN_DATA_DIR")
        .output()
        .expect("spawn cglearn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_demo(out: &Path) -> Output {
    cglearn(&[
        "run",
        "--scenario",
        "two-feature-demo",
        "--trials",
        "3",
        "--seed",
        "11",
        "--quiet",
        "--output",
        out.to_str().unwrap(),
    ])
}

#[test]
fn demo_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_demo(dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty(), "--quiet still printed");
    for f in ["summary.csv", "trials.jsonl", "summary.txt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let lines = fs::read_to_string(dir.path().join("trials.jsonl")).unwrap();
    // two methods x three trials
    assert_eq!(lines.lines().count(), 6);
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("scenario,case,method,metric,mean,std,n,p_vs_erm,significant"));
}

#[test]
fn same_seed_same_trial_lines() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(small_demo(a.path()).status.success());
    assert!(small_demo(b.path()).status.success());
    let read = |d: &Path| fs::read(d.join("trials.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let read = |d: &Path| fs::read(d.join("summary.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn table_is_printed_without_quiet() {
    let dir = tempfile::tempdir().unwrap();
    let o = cglearn(&[
        "run",
        "--scenario",
        "gradcheck",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("max_relative_error"), "{text}");
    assert!(text.contains("results written to"));
}

#[test]
fn unknown_scenario_is_usage_error() {
    let o = cglearn(&["run", "--scenario", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_batches_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cglearn(&[
        "run",
        "--scenario",
        "linear-single",
        "--batches",
        "2",
        "--trials",
        "1",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("cglearn: "));
}

#[test]
fn bad_config_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "no_such_field = 1\n").unwrap();
    let o = cglearn(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_field"));
}

#[test]
fn missing_dataset_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = cglearn(&[
        "run",
        "--scenario",
        "real-regression",
        "--dataset",
        "yacht",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--output",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn config_subcommand_reflects_flags() {
    let o = cglearn(&[
        "config",
        "--scenario",
        "linear-multi",
        "--trials",
        "7",
        "--cases",
        "FEU,PES",
        "--methods",
        "erm,cglearn",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("scenario = \"linear-multi\""), "{text}");
    assert!(text.contains("trials = 7"));
    assert!(text.contains("\"FEU\""));
    assert!(text.contains("\"CGLearn\""));
}

#[test]
fn config_output_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = cglearn(&["config", "--scenario", "two-feature-demo", "--trials", "2"]);
    assert!(o.status.success());
    let path = dir.path().join("c.toml");
    fs::write(&path, &o.stdout).unwrap();
    let out = dir.path().join("out");
    let o = cglearn(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--quiet",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = fs::read_to_string(out.join("trials.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn export_envs_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("envs");
    let o = cglearn(&[
        "run",
        "--scenario",
        "linear-multi",
        "--cases",
        "FOU",
        "--trials",
        "1",
        "--methods",
        "erm",
        "--quiet",
        "--output",
        dir.path().join("out").to_str().unwrap(),
        "--export-envs",
        env_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<_> = fs::read_dir(&env_dir).unwrap().collect();
    assert!(!files.is_empty());
}
