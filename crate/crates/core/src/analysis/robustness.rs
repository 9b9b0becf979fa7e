use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use super::overlap::{OverlapReport, trim_by_propensity};
use crate::dkt::{DktModel, extract_features};
use crate::estimators::{self, EffectEstimate};
use crate::events::{EventLog, Gender};
use crate::forest::Design;
use crate::pipeline::{Covariates, EstimationConfig, EstimationResult, Outcome, estimate_effects, knowledge_covariates};
use crate::sample::{AnalyticRow, ControlMode, SamplePolicy, build_samples, link_placebo};
use crate::seeds;

/// Value of a named moderator on a row; `None` when the row lacks it.
pub fn moderator_value(name: &str, row: &AnalyticRow, log: &EventLog) -> Result<Option<f64>, AnalysisError> {
    let f = row.features.as_ref();
    let s = row.session.as_ref();
    Ok(match name {
        "mastery" | "p_current" => f.map(|f| f.p_current),
        "p_next" => f.map(|f| f.p_next),
        "cum_accuracy" => f.map(|f| f.cum_accuracy),
        "pretest" => log.context().get(&row.student_id).and_then(|c| c.pretest_score),
        "low_ses" => log
            .context()
            .get(&row.student_id)
            .and_then(|c| c.low_ses_flag)
            .map(|b| b as u8 as f64),
        "messages_total" => s.map(|s| s.messages_total as f64),
        "tutor_messages" => s.map(|s| s.tutor_messages as f64),
        "student_messages" => s.map(|s| s.student_messages as f64),
        "duration_minutes" => s.map(|s| s.duration_minutes),
        "student_word_share" => s.map(|s| s.student_word_share),
        "prior_session_count" => s.map(|s| s.prior_session_count as f64),
        other => return Err(AnalysisError::UnknownModerator(other.to_string())),
    })
}

/// Pretest, one-hot gender, low-SES flag and one-hot school per row.
pub fn context_covariates(rows: &[AnalyticRow], log: &EventLog) -> Result<Covariates, AnalysisError> {
    let ctx = log.context();
    let mut schools = BTreeSet::new();
    for r in rows {
        let c = ctx
            .get(&r.student_id)
            .ok_or_else(|| AnalysisError::MissingContext(r.student_id.clone()))?;
        schools.insert(
            c.school_id
                .clone()
                .ok_or_else(|| AnalysisError::MissingContext(r.student_id.clone()))?,
        );
    }
    let genders = [Gender::A, Gender::B, Gender::C];
    let mut names = vec!["pretest".to_string()];
    names.extend(genders.iter().map(|g| format!("gender_{}", g.as_str())));
    names.push("low_ses".into());
    names.extend(schools.iter().map(|s| format!("school_{s}")));

    let mut data = Vec::with_capacity(rows.len() * names.len());
    for r in rows {
        let c = &ctx[&r.student_id];
        let missing = || AnalysisError::MissingContext(r.student_id.clone());
        let gender = c.gender.ok_or_else(missing)?;
        data.push(c.pretest_score.ok_or_else(missing)?);
        data.extend(genders.iter().map(|g| (*g == gender) as u8 as f64));
        data.push(c.low_ses_flag.ok_or_else(missing)? as u8 as f64);
        let school = c.school_id.as_deref().ok_or_else(missing)?;
        data.extend(schools.iter().map(|s| (s == school) as u8 as f64));
    }
    Ok(Covariates {
        x: Design::new(rows.len(), names.len(), data),
        names,
    })
}

/// Re-estimates with the pre-anchor outcome `offset` attempts back.
#[allow(clippy::too_many_arguments)]
pub fn run_placebo(
    rows: &[AnalyticRow],
    x: &Design,
    log: &EventLog,
    offset: usize,
    min_coverage: f64,
    cfg: &EstimationConfig,
    seed: u64,
) -> Result<EstimationResult, AnalysisError> {
    let rows = link_placebo(rows.to_vec(), log, offset);
    let present = rows.iter().filter(|r| r.y_placebo.is_some()).count();
    let coverage = if rows.is_empty() { 0.0 } else { present as f64 / rows.len() as f64 };
    if present == 0 || coverage < min_coverage {
        return Err(AnalysisError::InsufficientPlaceboCoverage {
            coverage,
            required: min_coverage,
        });
    }
    let (result, _) = estimate_effects(&rows, x, Outcome::Placebo, cfg, seeds::derive_seed(seed, "placebo"))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ExternalCovariates,
    WashoutControls,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::ExternalCovariates => "external_covariates",
            Variant::WashoutControls => "washout_controls",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::ExternalCovariates => "With External Covariates",
            Variant::WashoutControls => "Washout Controls",
        }
    }
}

/// Everything a variant re-run needs from the primary analysis.
pub struct VariantInputs<'a> {
    /// Primary rows with knowledge features.
    pub rows: &'a [AnalyticRow],
    pub log: &'a EventLog,
    pub policy: &'a SamplePolicy,
    pub model: &'a DktModel,
    pub cfg: &'a EstimationConfig,
    pub washout_skills: usize,
    pub seed: u64,
}

pub fn run_variant(variant: Variant, outcome: Outcome, inputs: &VariantInputs) -> Result<EstimationResult, AnalysisError> {
    let seed = seeds::derive_seed(inputs.seed, variant.as_str());
    match variant {
        Variant::ExternalCovariates => {
            let base = knowledge_covariates(inputs.rows)?;
            let ctx = context_covariates(inputs.rows, inputs.log)?;
            let x = base.x.hstack(&ctx.x);
            Ok(estimate_effects(inputs.rows, &x, outcome, inputs.cfg, seed)?.0)
        }
        Variant::WashoutControls => {
            let policy = SamplePolicy {
                control_mode: ControlMode::Washout {
                    k_skills: inputs.washout_skills,
                },
                ..inputs.policy.clone()
            };
            let samples = build_samples(inputs.log, &policy)?;
            let (rows, _) = extract_features(inputs.model, samples.all_rows(), inputs.log);
            let x = knowledge_covariates(&rows)?;
            Ok(estimate_effects(&rows, &x.x, outcome, inputs.cfg, seed)?.0)
        }
    }
}

/// ATE over units whose propensity lies in `[lo, hi]`, reusing the fitted
/// nuisances and CATEs.
pub fn trimmed_effect(result: &EstimationResult, lo: f64, hi: f64) -> Result<(EffectEstimate, OverlapReport), AnalysisError> {
    let (kept, report) = trim_by_propensity(&result.nuisance.e_hat, lo, hi)?;
    let pick = |v: &[f64]| kept.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let clusters = result.clusters();
    let nuisance = estimators::NuisanceEstimates {
        m_hat: pick(&result.nuisance.m_hat),
        e_hat: pick(&result.nuisance.e_hat),
    };
    let ate = estimators::aipw_ate(
        &pick(&result.y),
        &pick(&result.z),
        &nuisance,
        &pick(&result.tau),
        &kept.iter().map(|&i| clusters[i]).collect::<Vec<_>>(),
    )
    .map_err(crate::pipeline::EstimateError::from)?;
    Ok((ate, report))
}
