use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use causal_kt::pipeline::report::dir_digest;
use causal_kt::pipeline::{PipelineConfig, PipelineError, Stage, Workspace};

fn small_cfg(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.simulate.n_students = 240;
    cfg.estimation.forest.n_trees = 24;
    cfg.dkt.epochs = 1;
    cfg.paths.out = out.to_path_buf();
    cfg
}

fn digests(ws: &Workspace) -> BTreeMap<&'static str, String> {
    Stage::ALL
        .iter()
        .map(|&s| (s.name(), dir_digest(&ws.stage_dir(s)).unwrap()))
        .collect()
}

/// One full run shared by the tests that only read it.
fn full_run() -> &'static (tempfile::TempDir, BTreeMap<&'static str, String>) {
    static RUN: OnceLock<(tempfile::TempDir, BTreeMap<&'static str, String>)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let ws = Workspace::new(dir.path());
        ws.run_all(&cfg).unwrap();
        let d = digests(&ws);
        (dir, d)
    })
}

#[test]
fn stagewise_run_matches_run_all() {
    let (_, all) = full_run();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let ws = Workspace::new(dir.path());
    for stage in Stage::ALL {
        ws.run_stage(stage, &cfg).unwrap();
    }
    assert_eq!(&digests(&ws), all);
}

#[test]
fn rerunning_a_stage_is_idempotent() {
    let (root, all) = full_run();
    let dir = tempfile::tempdir().unwrap();
    for stage in Stage::ALL {
        copy_dir(&root.path().join(stage.dir()), &dir.path().join(stage.dir()));
    }
    let cfg = small_cfg(dir.path());
    let ws = Workspace::new(dir.path());
    ws.run_stage(Stage::Estimate, &cfg).unwrap();
    ws.run_stage(Stage::Analyze, &cfg).unwrap();
    assert_eq!(&digests(&ws), all);
}

#[test]
fn report_bundle_is_complete() {
    let (root, _) = full_run();
    let report = root.path().join(Stage::Analyze.dir());
    for name in ["report.md", "effects.json", "manifest.json", "flow.md"] {
        assert!(report.join(name).exists(), "missing {name}");
    }
    let md = fs::read_to_string(report.join("report.md")).unwrap();
    assert!(md.contains("Placebo Test (Pre-Intervention)"));
    let timings: BTreeMap<String, f64> =
        serde_json::from_slice(&fs::read(root.path().join("timings.json")).unwrap()).unwrap();
    assert_eq!(timings.len(), Stage::ALL.len());
}

#[test]
fn corrupted_checkpoint_is_a_checksum_error() {
    let (root, _) = full_run();
    let dir = tempfile::tempdir().unwrap();
    for stage in [Stage::Simulate, Stage::Prep, Stage::TrainDkt] {
        copy_dir(&root.path().join(stage.dir()), &dir.path().join(stage.dir()));
    }
    let ckpt = dir.path().join(Stage::TrainDkt.dir()).join("model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x20;
    fs::write(&ckpt, bytes).unwrap();

    let cfg = small_cfg(dir.path());
    let err = Workspace::new(dir.path()).run_stage(Stage::Extract, &cfg).unwrap_err();
    assert!(matches!(err.error, PipelineError::Checkpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!dir.path().join(Stage::Extract.dir()).exists());
    let marker: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("failed/error.json")).unwrap()).unwrap();
    assert_eq!(marker["stage"], "extract");
}

#[test]
fn missing_upstream_artifact_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    let err = Workspace::new(dir.path()).run_stage(Stage::Estimate, &cfg).unwrap_err();
    match &err.error {
        PipelineError::MissingUpstreamArtifact(p) => assert!(p.ends_with("rows.ckpt"), "{}", p.display()),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn configured_log_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.paths.log = Some(dir.path().join("nowhere.csv"));
    let err = Workspace::new(dir.path()).run_all(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Prep);
    assert!(err.to_string().contains("nowhere.csv"), "{err}");
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}
