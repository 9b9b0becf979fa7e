use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Outcome;
use super::estimate::EstimationConfig;
use crate::analysis::{HetMethod, Variant};
use crate::dkt::DktConfig;
use crate::sample::SamplePolicy;
use crate::seeds;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Event log; when absent the `simulate` stage generates one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sessions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            log: None,
            sessions: None,
            context: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    /// Moderators fitted one at a time against the CATEs (z-scored).
    pub moderators: Vec<String>,
    /// Pairs fitted as `a + b + a:b`.
    pub interactions: Vec<[String; 2]>,
    pub het_method: HetMethod,
    /// Session characteristics compared across quartiles on treated rows.
    pub session_vars: Vec<String>,
    pub variants: Vec<Variant>,
    /// Outcomes the variants are re-run for.
    pub variant_outcomes: Vec<Outcome>,
    pub washout_skills: usize,
    pub trim: [f64; 2],
    pub placebo: bool,
    pub placebo_min_coverage: f64,
    pub benchmarks: Vec<String>,
    pub sensitivity_q: f64,
    pub cate_histogram_bins: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            moderators: vec!["mastery".into(), "pretest".into()],
            interactions: vec![["mastery".into(), "low_ses".into()]],
            het_method: HetMethod::ClusterRobustOls,
            session_vars: vec![
                "messages_total".into(),
                "student_word_share".into(),
                "prior_session_count".into(),
            ],
            variants: vec![Variant::ExternalCovariates, Variant::WashoutControls],
            variant_outcomes: vec![Outcome::Immediate],
            washout_skills: 2,
            trim: [0.05, 0.95],
            placebo: true,
            placebo_min_coverage: 0.5,
            benchmarks: vec!["p_current".into(), "cum_accuracy".into(), "low_ses".into()],
            sensitivity_q: 1.0,
            cate_histogram_bins: 40,
        }
    }
}

/// Every knob of a pipeline run. Component `seed` fields are replaced by
/// seeds derived from the global `seed` and the stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub outcomes: Vec<Outcome>,
    pub paths: Paths,
    pub simulate: SimConfig,
    pub sample: SamplePolicy,
    pub dkt: DktConfig,
    pub estimation: EstimationConfig,
    pub analysis: AnalysisOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut estimation = EstimationConfig::default();
        estimation.forest.n_trees = 200;
        PipelineConfig {
            seed: 1,
            outcomes: vec![Outcome::Immediate, Outcome::NearTransfer],
            paths: Paths::default(),
            simulate: SimConfig::default(),
            sample: SamplePolicy::default(),
            dkt: DktConfig::default(),
            estimation,
            analysis: AnalysisOptions::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<PipelineConfig, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        // relative data paths resolve against the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.log, &mut cfg.paths.sessions, &mut cfg.paths.context]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seeds::derive_seed(self.seed, stage)
    }

    /// Copy with every component seed set from the global seed.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.simulate.seed = self.stage_seed("simulate");
        c.sample.seed = self.stage_seed("sample");
        c.dkt.seed = self.stage_seed("dkt");
        c.estimation.forest.seed = self.stage_seed("estimate");
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.outcomes.is_empty() {
            return bad("outcomes must not be empty".into());
        }
        if self.outcomes.contains(&Outcome::Placebo) {
            return bad("the placebo outcome is run by the analysis stage".into());
        }
        if let Err(e) = self.sample.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.dkt.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.estimation.forest.validate() {
            return bad(e.to_string());
        }
        if self.paths.log.is_none() {
            if let Err(e) = self.simulate.validate() {
                return bad(e.to_string());
            }
        }
        let [lo, hi] = self.estimation.propensity_clamp;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("propensity_clamp [{lo}, {hi}] must satisfy 0 < lo < hi < 1"));
        }
        let [lo, hi] = self.analysis.trim;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("trim [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"));
        }
        if !(self.analysis.sensitivity_q > 0.0 && self.analysis.sensitivity_q <= 1.0) {
            return bad("sensitivity_q must be in (0, 1]".into());
        }
        if self.analysis.cate_histogram_bins == 0 {
            return bad("cate_histogram_bins must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text, "mem").unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 9\n[simulate]\nn_students = 50\n", "mem").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.simulate.n_students, 50);
        assert_eq!(cfg.dkt, DktConfig::default());
    }

    #[test]
    fn stage_seeds_depend_on_global_seed_and_name() {
        let a = PipelineConfig::default().resolved();
        let b = PipelineConfig { seed: 2, ..PipelineConfig::default() }.resolved();
        assert_ne!(a.simulate.seed, a.dkt.seed);
        assert_ne!(a.simulate.seed, b.simulate.seed);
        assert_eq!(a, PipelineConfig::default().resolved());
    }

    #[test]
    fn invalid_values_are_reported() {
        let cfg = PipelineConfig::from_toml("[analysis]\ntrim = [0.9, 0.1]\n", "mem").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(m)) if m.contains("trim")));
        assert!(PipelineConfig::from_toml("seed = \"x\"", "mem").is_err());
    }
}
