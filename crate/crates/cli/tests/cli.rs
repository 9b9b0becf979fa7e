use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-kt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn print_defaults_is_loadable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--print-defaults"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[simulate]") && text.contains("n_trees"));
    std::fs::write(dir.path().join("c.toml"), &text).unwrap();
    let again = run(&["--config", "c.toml", "--print-defaults"], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn missing_log_exits_nonzero_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "--log", "no/such/events.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no/such/events.csv"), "{}", stderr(&out));
}

#[test]
fn bad_config_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[estimation.forest]\nn_trees = 0\n").unwrap();
    let out = run(&["--config", "bad.toml", "estimate"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn stage_without_upstream_reports_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--out", "w", "analyze"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("missing upstream artifact w/"), "{}", stderr(&out));
}

#[test]
fn small_run_writes_the_report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("small.toml"),
        "[simulate]\nn_students = 200\n[dkt]\nepochs = 1\n[estimation.forest]\nn_trees = 20\n",
    )
    .unwrap();
    let out = run(&["--config", "small.toml", "--out", "w", "--seed", "3", "--threads", "2", "run"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report = dir.path().join("w/report");
    for name in ["report.md", "effects.json", "manifest.json"] {
        assert!(report.join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 3);
}
