//! Stage-wise execution over an output directory.
//!
//! Every stage reads its inputs from the final directories of upstream
//! stages and writes into a staging directory that replaces its own final
//! directory on success. A failed stage leaves its partial outputs and an
//! `error.json` under `failed/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, PipelineConfig};
use super::estimate::{
    EstimateError, EstimationResult, FittedForests, Outcome, effects_from_forests, fit_forests,
    knowledge_covariates,
};
use super::report;
use crate::analysis::AnalysisError;
use crate::checkpoint::{self, CheckpointError};
use crate::dkt::{DktError, DktModel, ExtractDiagnostics, evaluate_auc, extract_features, train_dkt};
use crate::events::{
    EventLog, Format, IngestError, IngestOptions, emit_events, ingest_context, ingest_events_with,
    ingest_sessions, validate_log, write_context, write_sessions,
};
use crate::forest::ForestError;
use crate::estimators::EstimatorError;
use crate::sample::{AnalyticRow, SampleError, SampleFlowReport, build_samples, sort_rows};
use crate::sim::{SimError, simulate_population};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("missing upstream artifact {}", .0.display())]
    MissingUpstreamArtifact(PathBuf),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 2 config error, 3 data error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numeric(_) => 4,
            _ => 3,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            SimError::EmptySelection => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SampleError> for PipelineError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::InvalidPolicy(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<DktError> for PipelineError {
    fn from(e: DktError) -> Self {
        match e {
            DktError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            DktError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ForestError> for PipelineError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            ForestError::LengthMismatch(_) => PipelineError::Data(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<EstimatorError> for PipelineError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::LengthMismatch(_)
            | EstimatorError::Empty
            | EstimatorError::NoTreatedUnits
            | EstimatorError::TooFewClusters(_) => {
                PipelineError::Data(e.to_string())
            }
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<EstimateError> for PipelineError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::Forest(f) => f.into(),
            EstimateError::Estimator(f) => f.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<AnalysisError> for PipelineError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Estimate(inner) => inner.into(),
            AnalysisError::Sample(inner) => inner.into(),
            AnalysisError::UnknownModerator(_) | AnalysisError::InvalidBounds(..) => {
                PipelineError::Config(e.to_string())
            }
            AnalysisError::RankDeficientDesign(_) | AnalysisError::NonFinite(_) => {
                PipelineError::Numeric(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {error}")]
pub struct StageError {
    pub stage: Stage,
    pub error: PipelineError,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Prep,
    TrainDkt,
    Extract,
    Estimate,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Prep,
        Stage::TrainDkt,
        Stage::Extract,
        Stage::Estimate,
        Stage::Analyze,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Prep => "prep",
            Stage::TrainDkt => "train-dkt",
            Stage::Extract => "extract",
            Stage::Estimate => "estimate",
            Stage::Analyze => "analyze",
        }
    }

    /// Output directory of the stage, relative to the run root.
    pub fn dir(&self) -> &'static str {
        match self {
            Stage::Simulate => "data",
            Stage::Prep => "sample",
            Stage::TrainDkt => "dkt",
            Stage::Extract => "features",
            Stage::Estimate => "estimate",
            Stage::Analyze => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sample stage output; the holdout is kept as student ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleArtifact {
    pub treated: Vec<AnalyticRow>,
    pub control: Vec<AnalyticRow>,
    pub holdout_students: Vec<String>,
    pub flow: SampleFlowReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureArtifact {
    pub rows: Vec<AnalyticRow>,
    pub diagnostics: ExtractDiagnostics,
}

/// Forests with the digest of the inputs they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestArtifact {
    pub input_digest: String,
    pub forests: FittedForests,
}

pub const KIND_SAMPLES: &str = "samples";
pub const KIND_DKT: &str = "dkt-model";
pub const KIND_FEATURES: &str = "features";
pub const KIND_FORESTS: &str = "forests";
pub const KIND_RESULT: &str = "estimation-result";

pub struct Workspace {
    pub root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report values serialize");
    text.push('\n');
    write_file(path, text)
}

fn save_ckpt<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<(), PipelineError> {
    write_file(path, checkpoint::to_bytes(kind, value))
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingUpstreamArtifact(path))
    }
}

fn load_ckpt<T: serde::de::DeserializeOwned>(path: PathBuf, kind: &str) -> Result<T, PipelineError> {
    let path = require(path)?;
    Ok(checkpoint::load(kind, &path)?)
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Workspace {
        Workspace { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    pub fn events_path(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.paths.log.clone().unwrap_or_else(|| self.stage_dir(Stage::Simulate).join("events.csv"))
    }

    fn side_table(&self, configured: &Option<PathBuf>, name: &str, cfg: &PipelineConfig) -> Option<PathBuf> {
        match configured {
            Some(p) => Some(p.clone()),
            None if cfg.paths.log.is_none() => Some(self.stage_dir(Stage::Simulate).join(name)),
            None => None,
        }
    }

    /// Event log with its session and context tables.
    pub fn load_log(&self, cfg: &PipelineConfig) -> Result<EventLog, PipelineError> {
        let path = self.events_path(cfg);
        if !path.exists() {
            return Err(if cfg.paths.log.is_some() {
                PipelineError::Config(format!("log file {} does not exist", path.display()))
            } else {
                PipelineError::MissingUpstreamArtifact(path)
            });
        }
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let opts = IngestOptions {
            source: path.display().to_string(),
            ..IngestOptions::default()
        };
        let mut log = ingest_events_with(file, Format::from_path(&path), &opts)?;
        if let Some(p) = self.side_table(&cfg.paths.sessions, "sessions.csv", cfg) {
            let file = fs::File::open(require(p.clone())?).map_err(io_err(&p))?;
            log = log.with_sessions(ingest_sessions(file, Format::from_path(&p))?);
        }
        if let Some(p) = self.side_table(&cfg.paths.context, "context.csv", cfg) {
            if p.exists() || cfg.paths.context.is_some() {
                let file = fs::File::open(require(p.clone())?).map_err(io_err(&p))?;
                log = log.with_context(ingest_context(file, Format::from_path(&p))?);
            }
        }
        Ok(log)
    }

    fn result_path(&self, outcome: Outcome) -> PathBuf {
        self.stage_dir(Stage::Estimate).join(outcome.as_str()).join("result.ckpt")
    }

    pub fn load_samples(&self) -> Result<SampleArtifact, PipelineError> {
        load_ckpt(self.stage_dir(Stage::Prep).join("samples.ckpt"), KIND_SAMPLES)
    }

    pub fn load_model(&self) -> Result<DktModel, PipelineError> {
        load_ckpt(self.stage_dir(Stage::TrainDkt).join("model.ckpt"), KIND_DKT)
    }

    pub fn load_features(&self) -> Result<FeatureArtifact, PipelineError> {
        load_ckpt(self.stage_dir(Stage::Extract).join("rows.ckpt"), KIND_FEATURES)
    }

    pub fn load_result(&self, outcome: Outcome) -> Result<EstimationResult, PipelineError> {
        load_ckpt(self.result_path(outcome), KIND_RESULT)
    }

    /// Runs `stage`, moving its staging directory into place on success or
    /// under `failed/` on error.
    pub fn run_stage(&self, stage: Stage, cfg: &PipelineConfig) -> Result<(), StageError> {
        let fail = |error: PipelineError| StageError { stage, error };
        let staging = self.root.join(format!(".staging-{}", stage.dir()));
        let failed = self.root.join("failed");
        let clear = |p: &Path| -> Result<(), PipelineError> {
            if p.exists() {
                fs::remove_dir_all(p).map_err(io_err(p))?;
            }
            Ok(())
        };
        clear(&staging).map_err(fail)?;
        fs::create_dir_all(&staging).map_err(io_err(&staging)).map_err(fail)?;
        let started = Instant::now();
        let outcome = match stage {
            Stage::Simulate => self.simulate(cfg, &staging),
            Stage::Prep => self.prep(cfg, &staging),
            Stage::TrainDkt => self.train_dkt(cfg, &staging),
            Stage::Extract => self.extract(cfg, &staging),
            Stage::Estimate => self.estimate(cfg, &staging),
            Stage::Analyze => self.analyze(cfg, &staging),
        };
        let elapsed = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => {
                let dest = self.stage_dir(stage);
                clear(&dest).map_err(fail)?;
                fs::rename(&staging, &dest).map_err(io_err(&dest)).map_err(fail)?;
                if failed.join("error.json").exists() {
                    let marker: serde_json::Value = fs::read(failed.join("error.json"))
                        .ok()
                        .and_then(|b| serde_json::from_slice(&b).ok())
                        .unwrap_or_default();
                    if marker["stage"] == stage.name() {
                        clear(&failed).map_err(fail)?;
                    }
                }
                self.record_timing(stage, elapsed).map_err(fail)?;
                Ok(())
            }
            Err(error) => {
                let dest = failed.join(stage.dir());
                let _ = clear(&failed);
                let _ = fs::create_dir_all(&failed);
                let _ = fs::rename(&staging, &dest);
                let marker = serde_json::json!({
                    "stage": stage.name(),
                    "error": error.to_string(),
                    "exit_code": error.exit_code(),
                });
                let _ = write_json(&failed.join("error.json"), &marker);
                Err(fail(error))
            }
        }
    }

    /// Every stage in order; `simulate` is skipped when a log is configured.
    pub fn run_all(&self, cfg: &PipelineConfig) -> Result<(), StageError> {
        for stage in Stage::ALL {
            if stage == Stage::Simulate && cfg.paths.log.is_some() {
                continue;
            }
            self.run_stage(stage, cfg)?;
        }
        Ok(())
    }

    fn record_timing(&self, stage: Stage, seconds: f64) -> Result<(), PipelineError> {
        let path = self.root.join("timings.json");
        let mut timings: BTreeMap<String, f64> = fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        timings.insert(stage.name().to_string(), seconds);
        write_json(&path, &timings)
    }

    fn simulate(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let cfg = cfg.resolved();
        let (log, truth) = simulate_population(&cfg.simulate)?;
        let mut buf = Vec::new();
        emit_events(&log, Format::Csv, &mut buf)?;
        write_file(&dir.join("events.csv"), &buf)?;
        buf.clear();
        write_sessions(log.sessions(), Format::Csv, &mut buf)?;
        write_file(&dir.join("sessions.csv"), &buf)?;
        buf.clear();
        write_context(log.context(), Format::Csv, &mut buf)?;
        write_file(&dir.join("context.csv"), &buf)?;
        buf.clear();
        truth.write_jsonl(&mut buf).map_err(io_err(&dir.join("ground_truth.jsonl")))?;
        write_file(&dir.join("ground_truth.jsonl"), &buf)?;
        write_json(&dir.join("simulation.json"), &cfg.simulate)
    }

    fn prep(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let cfg = cfg.resolved();
        let log = self.load_log(&cfg)?;
        write_json(&dir.join("validation.json"), &validate_log(&log))?;
        let samples = build_samples(&log, &cfg.sample)?;
        let problems = samples.flow.check();
        if !problems.is_empty() {
            return Err(PipelineError::Data(format!("sample flow check failed: {}", problems.join("; "))));
        }
        write_file(&dir.join("flow.md"), samples.flow.to_markdown())?;
        write_json(&dir.join("flow.json"), &samples.flow)?;
        for (name, rows) in [("treated.jsonl", &samples.treated), ("control.jsonl", &samples.control)] {
            let mut text = String::new();
            for r in rows {
                text.push_str(&serde_json::to_string(r).expect("rows serialize"));
                text.push('\n');
            }
            write_file(&dir.join(name), text)?;
        }
        let artifact = SampleArtifact {
            holdout_students: samples.holdout.student_ids().map(str::to_string).collect(),
            treated: samples.treated,
            control: samples.control,
            flow: samples.flow,
        };
        save_ckpt(&dir.join("samples.ckpt"), KIND_SAMPLES, &artifact)
    }

    fn train_dkt(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let cfg = cfg.resolved();
        let samples = self.load_samples()?;
        let log = self.load_log(&cfg)?;
        let holdout_ids: std::collections::BTreeSet<&str> =
            samples.holdout_students.iter().map(String::as_str).collect();
        let holdout = log.subset(|id| holdout_ids.contains(id), "holdout");
        let model = train_dkt(&holdout, &cfg.dkt)?;
        let control_ids: std::collections::BTreeSet<&str> = samples
            .control
            .iter()
            .filter(|r| !r.washout)
            .map(|r| r.student_id.as_str())
            .collect();
        let eval = log.subset(|id| control_ids.contains(id), "analytic-control");
        let auc = evaluate_auc(&model, &eval)?;
        let mut curve = String::from("epoch,loss,auc\n");
        for s in &model.curve {
            let auc = s.auc.map(|a| a.to_string()).unwrap_or_default();
            curve.push_str(&format!("{},{},{}\n", s.epoch, s.loss, auc));
        }
        write_file(&dir.join("training.csv"), curve)?;
        write_json(
            &dir.join("evaluation.json"),
            &serde_json::json!({
                "holdout_students": holdout.n_students(),
                "evaluation_students": eval.n_students(),
                "auc": auc,
            }),
        )?;
        save_ckpt(&dir.join("model.ckpt"), KIND_DKT, &model)
    }

    fn extract(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let cfg = cfg.resolved();
        let samples = self.load_samples()?;
        let model = self.load_model()?;
        let log = self.load_log(&cfg)?;
        let mut rows = samples.treated;
        rows.extend(samples.control);
        sort_rows(&mut rows);
        let (rows, diagnostics) = extract_features(&model, rows, &log);
        write_json(&dir.join("diagnostics.json"), &diagnostics)?;
        save_ckpt(&dir.join("rows.ckpt"), KIND_FEATURES, &FeatureArtifact { rows, diagnostics })
    }

    fn estimate(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let cfg = cfg.resolved();
        let features = self.load_features()?;
        let cov = knowledge_covariates(&features.rows)?;
        let seed = cfg.estimation.forest.seed;
        for &outcome in &cfg.outcomes {
            let digest = checkpoint::sha256_hex(
                serde_json::to_string(&(&cfg.estimation, outcome, seed, &features.rows))
                    .expect("inputs serialize")
                    .as_bytes(),
            );
            // forests from an earlier run are reused when their inputs match
            let previous = self.stage_dir(Stage::Estimate).join(outcome.as_str()).join("forests.ckpt");
            let reused = if previous.exists() {
                let art: ForestArtifact = checkpoint::load(KIND_FORESTS, &previous)?;
                (art.input_digest == digest).then_some(art)
            } else {
                None
            };
            let art = match reused {
                Some(a) => a,
                None => ForestArtifact {
                    input_digest: digest,
                    forests: fit_forests(&features.rows, &cov.x, outcome, &cfg.estimation, seed)?,
                },
            };
            let result = effects_from_forests(&features.rows, &cov.x, outcome, &cfg.estimation, &art.forests)?;
            let sub = dir.join(outcome.as_str());
            save_ckpt(&sub.join("forests.ckpt"), KIND_FORESTS, &art)?;
            save_ckpt(&sub.join("result.ckpt"), KIND_RESULT, &result)?;
            write_json(
                &sub.join("summary.json"),
                &serde_json::json!({
                    "outcome": outcome,
                    "ate": result.ate,
                    "att": result.att,
                    "naive_pp": result.naive_pp,
                    "forest_warnings": art.forests.m.warnings.iter()
                        .chain(&art.forests.e.warnings)
                        .chain(&art.forests.tau.warnings)
                        .collect::<Vec<_>>(),
                }),
            )?;
        }
        Ok(())
    }

    fn analyze(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let cfg = cfg.resolved();
        let log = self.load_log(&cfg)?;
        let samples = self.load_samples()?;
        let model = self.load_model()?;
        let features = self.load_features()?;
        let mut results = Vec::new();
        for &o in &cfg.outcomes {
            results.push(self.load_result(o)?);
        }
        let inputs = report::ReportInputs {
            cfg: &cfg,
            log: &log,
            samples: &samples,
            model: &model,
            rows: &features.rows,
            results: &results,
        };
        report::write_report(&inputs, dir)?;
        report::write_manifest(self, &cfg, dir)
    }
}
