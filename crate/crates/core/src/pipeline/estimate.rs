use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dkt::feature_names;
use crate::estimators::{
    self, EffectEstimate, Estimand, EstimatorError, NuisanceEstimates, ResidualizedData,
};
use crate::forest::{
    self, CausalForestModel, Design, Forest, ForestConfig, ForestError, cluster_index,
};
use crate::sample::AnalyticRow;
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum EstimateError {
    #[error("row {0} has no knowledge features")]
    MissingFeatures(String),
    #[error("no rows carry the {0:?} outcome")]
    NoOutcome(Outcome),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Immediate,
    NearTransfer,
    Placebo,
}

impl Outcome {
    pub fn of(&self, row: &AnalyticRow) -> Option<bool> {
        match self {
            Outcome::Immediate => row.y_next,
            Outcome::NearTransfer => row.y_skill,
            Outcome::Placebo => row.y_placebo,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Immediate => "immediate",
            Outcome::NearTransfer => "near_transfer",
            Outcome::Placebo => "placebo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub forest: ForestConfig,
    /// Trees of the two nuisance forests; `None` uses `forest.n_trees`.
    pub nuisance_trees: Option<usize>,
    pub propensity_clamp: [f64; 2],
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            forest: ForestConfig::default(),
            nuisance_trees: None,
            propensity_clamp: [0.01, 0.99],
        }
    }
}

/// Covariate matrix of the rows plus its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub x: Design,
    pub names: Vec<String>,
}

/// Knowledge features of every row as a design matrix.
pub fn knowledge_covariates(rows: &[AnalyticRow]) -> Result<Covariates, EstimateError> {
    let mut data = Vec::new();
    let mut width = None;
    for r in rows {
        let f = r
            .features
            .as_ref()
            .ok_or_else(|| EstimateError::MissingFeatures(r.unit_id.clone()))?;
        let v = f.to_vec();
        width.get_or_insert(v.len());
        data.extend(v);
    }
    let p = width.unwrap_or(0);
    Ok(Covariates {
        x: Design::new(rows.len(), p, data),
        names: feature_names(p.saturating_sub(3)),
    })
}

/// Everything produced by one estimation run over one outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub outcome: Outcome,
    pub unit_ids: Vec<String>,
    pub student_ids: Vec<String>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub nuisance: NuisanceEstimates,
    pub residuals: ResidualizedData,
    pub tau: Vec<f64>,
    pub n_trees_used: Vec<usize>,
    pub ate: EffectEstimate,
    pub att: EffectEstimate,
    pub naive_pp: f64,
}

impl EstimationResult {
    pub fn clusters(&self) -> Vec<usize> {
        cluster_index(&self.student_ids)
    }
}

/// Fitted forests of one run, kept apart so results stay small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedForests {
    pub m: Forest,
    pub e: Forest,
    pub tau: CausalForestModel,
}

/// Rows (and their covariate rows) that carry `outcome`.
pub fn select_rows<'a>(rows: &'a [AnalyticRow], x: &Design, outcome: Outcome) -> (Vec<&'a AnalyticRow>, Design) {
    let idx: Vec<usize> = (0..rows.len()).filter(|&i| outcome.of(&rows[i]).is_some()).collect();
    (idx.iter().map(|&i| &rows[i]).collect(), x.select(&idx))
}

struct Prepared<'a> {
    rows: Vec<&'a AnalyticRow>,
    x: Design,
    y: Vec<f64>,
    z: Vec<f64>,
    student_ids: Vec<String>,
    clusters: Vec<usize>,
}

fn prepare<'a>(rows: &'a [AnalyticRow], x: &Design, outcome: Outcome) -> Result<Prepared<'a>, EstimateError> {
    let (rows, x) = select_rows(rows, x, outcome);
    if rows.is_empty() {
        return Err(EstimateError::NoOutcome(outcome));
    }
    let y = rows.iter().map(|r| outcome.of(r).unwrap() as u8 as f64).collect();
    let z = rows.iter().map(|r| r.z as f64).collect();
    let student_ids: Vec<String> = rows.iter().map(|r| r.student_id.clone()).collect();
    let clusters = cluster_index(&student_ids);
    Ok(Prepared {
        rows,
        x,
        y,
        z,
        student_ids,
        clusters,
    })
}

fn nuisances(
    d: &Prepared,
    m: &Forest,
    e: &Forest,
    cfg: &EstimationConfig,
) -> Result<(NuisanceEstimates, ResidualizedData), EstimateError> {
    let m_hat = forest::oob_predict(m, &d.x, &d.clusters)?.values;
    let e_hat = forest::oob_predict(e, &d.x, &d.clusters)?.values;
    let [lo, hi] = cfg.propensity_clamp;
    let nuisance = NuisanceEstimates { m_hat, e_hat }.clamped(lo, hi);
    let residuals = estimators::residualize(&d.y, &d.z, &nuisance)?;
    Ok((nuisance, residuals))
}

/// Fits the outcome, propensity and causal forests for `outcome`.
pub fn fit_forests(
    rows: &[AnalyticRow],
    x: &Design,
    outcome: Outcome,
    cfg: &EstimationConfig,
    seed: u64,
) -> Result<FittedForests, EstimateError> {
    let d = prepare(rows, x, outcome)?;
    let label = outcome.as_str();
    let nuis_cfg = |name: &str| ForestConfig {
        n_trees: cfg.nuisance_trees.unwrap_or(cfg.forest.n_trees),
        seed: seeds::derive_seed(seed, &format!("{label}/{name}")),
        ..cfg.forest.clone()
    };
    let m = forest::train_regression_forest(&d.x, &d.y, &d.clusters, &nuis_cfg("m"))?;
    let e = forest::train_regression_forest(&d.x, &d.z, &d.clusters, &nuis_cfg("e"))?;
    let (_, residuals) = nuisances(&d, &m, &e, cfg)?;
    let tau_cfg = ForestConfig {
        seed: seeds::derive_seed(seed, &format!("{label}/tau")),
        ..cfg.forest.clone()
    };
    let tau = forest::train_causal_forest(&d.x, &residuals.y_tilde, &residuals.z_tilde, &d.clusters, &tau_cfg)?;
    Ok(FittedForests { m, e, tau })
}

/// Out-of-bag nuisances, CATEs and AIPW averages from fitted forests.
pub fn effects_from_forests(
    rows: &[AnalyticRow],
    x: &Design,
    outcome: Outcome,
    cfg: &EstimationConfig,
    forests: &FittedForests,
) -> Result<EstimationResult, EstimateError> {
    let d = prepare(rows, x, outcome)?;
    let (nuisance, residuals) = nuisances(&d, &forests.m, &forests.e, cfg)?;
    let cate = forest::predict_cate(&forests.tau, &d.x, &d.clusters)?;
    let mut ate = estimators::aipw_ate(&d.y, &d.z, &nuisance, &cate.values, &d.clusters)?;
    let mut att = estimators::aipw_att(&d.y, &d.z, &nuisance, &cate.values, &d.clusters)?;
    if outcome == Outcome::Placebo {
        ate.estimand = Estimand::PlaceboAte;
        att.estimand = Estimand::PlaceboAte;
    }
    let naive_pp = estimators::naive_difference(&d.y, &d.z);
    Ok(EstimationResult {
        outcome,
        unit_ids: d.rows.iter().map(|r| r.unit_id.clone()).collect(),
        student_ids: d.student_ids,
        y: d.y,
        z: d.z,
        nuisance,
        residuals,
        tau: cate.values,
        n_trees_used: cate.n_trees_used,
        ate,
        att,
        naive_pp,
    })
}

/// Nuisance forests, residualization, causal forest and AIPW averages.
pub fn estimate_effects(
    rows: &[AnalyticRow],
    x: &Design,
    outcome: Outcome,
    cfg: &EstimationConfig,
    seed: u64,
) -> Result<(EstimationResult, FittedForests), EstimateError> {
    let forests = fit_forests(rows, x, outcome, cfg, seed)?;
    let result = effects_from_forests(rows, x, outcome, cfg, &forests)?;
    Ok((result, forests))
}
