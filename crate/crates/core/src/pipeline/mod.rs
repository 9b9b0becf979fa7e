//! End-to-end orchestration.

pub mod config;
pub mod estimate;
pub mod report;
pub mod stages;

pub use config::{AnalysisOptions, ConfigError, Paths, PipelineConfig};
pub use estimate::{
    Covariates, EstimateError, EstimationConfig, EstimationResult, FittedForests, Outcome,
    effects_from_forests, estimate_effects, fit_forests, knowledge_covariates, select_rows,
};
pub use stages::{PipelineError, Stage, StageError, Workspace};
