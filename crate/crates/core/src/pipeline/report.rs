//! Report bundle written by the `analyze` stage.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::PipelineConfig;
use super::estimate::{EstimationResult, Outcome, knowledge_covariates};
use super::stages::{PipelineError, SampleArtifact, Stage, Workspace, write_file, write_json};
use crate::analysis::{
    AnalysisError, ModeratorFit, OverlapReport, QuartileContrastTable, SensitivityReport, Variant,
    VariantInputs, benchmark, fit_moderator_model, moderator_value, quartile_contrasts,
    robustness_value, run_placebo, run_variant, trimmed_effect, zscore,
};
use crate::checkpoint::sha256_hex;
use crate::dkt::DktModel;
use crate::estimators::{EffectEstimate, bonferroni};
use crate::events::EventLog;
use crate::forest::{Design, cluster_index};
use crate::sample::AnalyticRow;

pub struct ReportInputs<'a> {
    pub cfg: &'a PipelineConfig,
    pub log: &'a EventLog,
    pub samples: &'a SampleArtifact,
    pub model: &'a DktModel,
    /// Rows with knowledge features.
    pub rows: &'a [AnalyticRow],
    /// Primary results in the order of `cfg.outcomes`.
    pub results: &'a [EstimationResult],
}

pub fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::Immediate => "Immediate Performance (Next Problem)",
        Outcome::NearTransfer => "Near Transfer (Next Skill)",
        Outcome::Placebo => "Placebo Test (Pre-Intervention)",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectRow {
    pub key: String,
    pub label: String,
    pub outcome: Outcome,
    pub ate: EffectEstimate,
    pub att: EffectEstimate,
    pub naive_pp: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectsTable {
    pub rows: Vec<EffectRow>,
    /// Rows that could not be estimated, with the reason.
    pub skipped: BTreeMap<String, String>,
    pub family_size: usize,
}

impl EffectsTable {
    fn from_rows(mut rows: Vec<EffectRow>, skipped: BTreeMap<String, String>) -> EffectsTable {
        let m = rows.len().max(1);
        let ate = bonferroni(&rows.iter().map(|r| r.ate.p_value).collect::<Vec<_>>(), m);
        let att = bonferroni(&rows.iter().map(|r| r.att.p_value).collect::<Vec<_>>(), m);
        for (i, r) in rows.iter_mut().enumerate() {
            r.ate.p_value_adjusted = Some(ate[i]);
            r.att.p_value_adjusted = Some(att[i]);
        }
        EffectsTable {
            rows,
            skipped,
            family_size: m,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| | ATE | ATT |\n|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!("| {} | {} | {} |\n", r.label, r.ate.cell(), r.att.cell()));
        }
        out.push_str(&format!(
            "\nEffects in percentage points with 95% confidence intervals. \
             Stars use Bonferroni-adjusted p-values over the {} rows of each column: \
             \\* p < 0.05, \\*\\* p < 0.01, \\*\\*\\* p < 0.001.\n",
            self.family_size
        ));
        for (k, why) in &self.skipped {
            out.push_str(&format!("\n{k}: not estimated ({why}).\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CateSummary {
    pub outcome: Outcome,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Summary of CATEs in percentage points; `sd` uses `n - 1`.
pub fn cate_summary(outcome: Outcome, tau: &[f64]) -> CateSummary {
    let v: Vec<f64> = tau.iter().map(|t| 100.0 * t).collect();
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n.max(1) as f64;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    CateSummary {
        outcome,
        n,
        mean,
        sd: if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 },
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Equal-width histogram over `[min, max]` as `lower,upper,count` CSV.
pub fn histogram_csv(values: &[f64], bins: usize) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; bins];
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let mut out = String::from("lower,upper,count\n");
    for (k, c) in counts.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", lo + k as f64 * width, lo + (k + 1) as f64 * width, c));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneitySection {
    pub outcome: Outcome,
    pub moderators: Vec<ModeratorFit>,
    pub interactions: Vec<ModeratorFit>,
    pub quartiles: Vec<QuartileContrastTable>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapSection {
    pub outcome: Outcome,
    pub overlap: OverlapReport,
    pub untrimmed: EffectEstimate,
    pub trimmed: EffectEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivitySection {
    pub outcome: Outcome,
    pub report: SensitivityReport,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub effects: EffectsTable,
    pub cates: Vec<CateSummary>,
    pub heterogeneity: Vec<HeterogeneitySection>,
    pub overlap: Vec<OverlapSection>,
    pub sensitivity: Vec<SensitivitySection>,
}

fn primary_row(r: &EstimationResult) -> EffectRow {
    EffectRow {
        key: r.outcome.as_str().to_string(),
        label: outcome_label(r.outcome).to_string(),
        outcome: r.outcome,
        ate: r.ate.clone(),
        att: r.att.clone(),
        naive_pp: r.naive_pp,
    }
}

fn effects_table(inp: &ReportInputs) -> Result<EffectsTable, PipelineError> {
    let opts = &inp.cfg.analysis;
    let mut rows: Vec<EffectRow> = inp.results.iter().map(primary_row).collect();
    let mut skipped = BTreeMap::new();
    let vin = VariantInputs {
        rows: inp.rows,
        log: inp.log,
        policy: &inp.cfg.sample,
        model: inp.model,
        cfg: &inp.cfg.estimation,
        washout_skills: opts.washout_skills,
        seed: inp.cfg.stage_seed("analyze"),
    };
    for &variant in &opts.variants {
        for &outcome in &opts.variant_outcomes {
            let label = if opts.variant_outcomes.len() > 1 {
                format!("{} ({})", variant.label(), outcome_label(outcome))
            } else {
                variant.label().to_string()
            };
            let key = format!("{}/{}", variant.as_str(), outcome.as_str());
            if variant == Variant::ExternalCovariates && inp.log.context().is_empty() {
                skipped.insert(label, "no student context table".into());
                continue;
            }
            let r = run_variant(variant, outcome, &vin)?;
            rows.push(EffectRow {
                key,
                label,
                ..primary_row(&r)
            });
        }
    }
    if opts.placebo {
        let label = outcome_label(Outcome::Placebo).to_string();
        let x = knowledge_covariates(inp.rows)?;
        match run_placebo(
            inp.rows,
            &x.x,
            inp.log,
            inp.cfg.sample.placebo_offset,
            opts.placebo_min_coverage,
            &inp.cfg.estimation,
            inp.cfg.stage_seed("analyze"),
        ) {
            Ok(r) => rows.push(primary_row(&r)),
            Err(e @ AnalysisError::InsufficientPlaceboCoverage { .. }) => {
                skipped.insert(label, e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EffectsTable::from_rows(rows, skipped))
}

fn rows_by_unit(rows: &[AnalyticRow]) -> HashMap<&str, &AnalyticRow> {
    rows.iter().map(|r| (r.unit_id.as_str(), r)).collect()
}

/// Values of `name` aligned with `units`; `None` for rows that lack it.
fn moderator_column(
    name: &str,
    units: &[&AnalyticRow],
    log: &EventLog,
) -> Result<Vec<Option<f64>>, AnalysisError> {
    units.iter().map(|r| moderator_value(name, r, log)).collect()
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let mut distinct = v.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    // binary indicators stay on their 0/1 scale
    if distinct.len() <= 2 { v.to_vec() } else { zscore(v) }
}

/// Fits `cates ~ 1 + columns` on the units where every column is present.
fn fit_columns(
    names: &[String],
    columns: &[Vec<Option<f64>>],
    interaction: bool,
    cates_pp: &[f64],
    students: &[&str],
    method: crate::analysis::HetMethod,
) -> Result<Option<ModeratorFit>, AnalysisError> {
    let keep: Vec<usize> = (0..cates_pp.len())
        .filter(|&i| columns.iter().all(|c| c[i].is_some()))
        .collect();
    if keep.len() < 3 {
        return Ok(None);
    }
    let mut cols: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| standardize(&keep.iter().map(|&i| c[i].unwrap()).collect::<Vec<_>>()))
        .collect();
    let mut names = names.to_vec();
    if interaction {
        cols.push(cols[0].iter().zip(&cols[1]).map(|(a, b)| a * b).collect());
        names.push(format!("{}:{}", names[0], names[1]));
    }
    let mut data = Vec::with_capacity(keep.len() * cols.len());
    for k in 0..keep.len() {
        data.extend(cols.iter().map(|c| c[k]));
    }
    let x = Design::new(keep.len(), cols.len(), data);
    let y: Vec<f64> = keep.iter().map(|&i| cates_pp[i]).collect();
    let clusters = cluster_index(&keep.iter().map(|&i| students[i]).collect::<Vec<_>>());
    fit_moderator_model(&y, &x, &names, &clusters, method).map(Some)
}

fn heterogeneity(inp: &ReportInputs, r: &EstimationResult) -> Result<HeterogeneitySection, AnalysisError> {
    let opts = &inp.cfg.analysis;
    let by_unit = rows_by_unit(inp.rows);
    let units: Vec<&AnalyticRow> = r.unit_ids.iter().map(|u| by_unit[u.as_str()]).collect();
    let students: Vec<&str> = r.student_ids.iter().map(String::as_str).collect();
    let cates: Vec<f64> = r.tau.iter().map(|t| 100.0 * t).collect();
    let mut sec = HeterogeneitySection {
        outcome: r.outcome,
        moderators: Vec::new(),
        interactions: Vec::new(),
        quartiles: Vec::new(),
        notes: Vec::new(),
    };
    for name in &opts.moderators {
        let col = moderator_column(name, &units, inp.log)?;
        match fit_columns(std::slice::from_ref(name), &[col], false, &cates, &students, opts.het_method)? {
            Some(fit) => sec.moderators.push(fit),
            None => sec.notes.push(format!("moderator {name}: too few units with values")),
        }
    }
    for [a, b] in &opts.interactions {
        let cols = vec![moderator_column(a, &units, inp.log)?, moderator_column(b, &units, inp.log)?];
        let names = [a.clone(), b.clone()];
        match fit_columns(&names, &cols, true, &cates, &students, opts.het_method)? {
            Some(fit) => sec.interactions.push(fit),
            None => sec.notes.push(format!("interaction {a}:{b}: too few units with values")),
        }
    }
    let treated: Vec<usize> = (0..units.len()).filter(|&i| units[i].treated()).collect();
    for var in &opts.session_vars {
        let col = moderator_column(var, &units, inp.log)?;
        let idx: Vec<usize> = treated.iter().copied().filter(|&i| col[i].is_some()).collect();
        if idx.len() < 4 {
            sec.notes.push(format!("quartiles of {var}: fewer than 4 treated units with values"));
            continue;
        }
        let clusters = cluster_index(&idx.iter().map(|&i| students[i]).collect::<Vec<_>>());
        match quartile_contrasts(
            var,
            &idx.iter().map(|&i| cates[i]).collect::<Vec<_>>(),
            &idx.iter().map(|&i| col[i].unwrap()).collect::<Vec<_>>(),
            &clusters,
        ) {
            Ok(t) => sec.quartiles.push(t),
            Err(e @ AnalysisError::DegenerateQuartiles { .. }) => sec.notes.push(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(sec)
}

fn sensitivity(inp: &ReportInputs, r: &EstimationResult) -> Result<SensitivitySection, AnalysisError> {
    let opts = &inp.cfg.analysis;
    let by_unit = rows_by_unit(inp.rows);
    let units: Vec<&AnalyticRow> = r.unit_ids.iter().map(|u| by_unit[u.as_str()]).collect();
    let mut notes = Vec::new();
    let mut names = Vec::new();
    let mut cols = Vec::new();
    for name in &opts.benchmarks {
        let col = moderator_column(name, &units, inp.log)?;
        if col.iter().all(Option::is_some) {
            names.push(name.clone());
            cols.push(col.into_iter().map(Option::unwrap).collect::<Vec<f64>>());
        } else {
            notes.push(format!("benchmark {name}: missing on some units, skipped"));
        }
    }
    let t = if r.ate.std_error > 0.0 { r.ate.estimate / r.ate.std_error } else { 0.0 };
    let dof = (r.y.len() as f64 - 2.0 - names.len() as f64).max(1.0);
    let mut report = robustness_value(t, dof, opts.sensitivity_q);
    if !names.is_empty() {
        let n = r.y.len();
        let mut data = Vec::with_capacity(n * names.len());
        for i in 0..n {
            data.extend(cols.iter().map(|c| c[i]));
        }
        let x = Design::new(n, names.len(), data);
        benchmark(&mut report, &r.y, &r.z, &x, &names)?;
    }
    Ok(SensitivitySection {
        outcome: r.outcome,
        report,
        notes,
    })
}

fn fit_markdown(fits: &[ModeratorFit]) -> String {
    let mut out = String::new();
    for f in fits {
        out.push_str(&format!(
            "**{}** ({} units, {} students, {:?})\n\n{}\n",
            f.names.join(" + "),
            f.n_units,
            f.cluster_count,
            f.method,
            f.to_markdown()
        ));
    }
    out
}

impl ReportBundle {
    pub fn to_markdown(&self, flow: &str) -> String {
        let mut out = String::from("# Effect report\n\n## Average effects\n\n");
        out.push_str(&self.effects.to_markdown());
        out.push_str("\nNaive difference in means (pp):\n\n");
        for r in &self.effects.rows {
            out.push_str(&format!("- {}: {:.2}\n", r.label, r.naive_pp));
        }
        out.push_str("\n## CATE distribution (pp)\n\n| Outcome | n | Mean | SD | Min | Max |\n|---|---|---|---|---|---|\n");
        for c in &self.cates {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                outcome_label(c.outcome),
                c.n,
                c.mean,
                c.sd,
                c.min,
                c.max
            ));
        }
        out.push_str("\n## Heterogeneity\n\n");
        for h in &self.heterogeneity {
            out.push_str(&format!("### {}\n\n", outcome_label(h.outcome)));
            out.push_str("Moderators are z-scored (binary indicators are left as 0/1); CATEs in pp.\n\n");
            out.push_str(&fit_markdown(&h.moderators));
            out.push_str(&fit_markdown(&h.interactions));
            for q in &h.quartiles {
                out.push_str(&q.to_markdown());
                out.push('\n');
            }
            for n in &h.notes {
                out.push_str(&format!("- {n}\n"));
            }
            out.push('\n');
        }
        out.push_str(
            "Estimated CATEs enter these models as outcomes; their estimation error is not propagated. \
             Quartile contrasts use a Bonferroni correction.\n",
        );
        out.push_str("\n## Overlap\n\n");
        for o in &self.overlap {
            out.push_str(&format!("### {}\n\n{}\n", outcome_label(o.outcome), o.overlap.to_markdown()));
            out.push_str(&format!(
                "ATE untrimmed {} / trimmed {}\n\n",
                o.untrimmed.cell(),
                o.trimmed.cell()
            ));
        }
        out.push_str("## Sensitivity\n\n");
        for s in &self.sensitivity {
            out.push_str(&format!("### {}\n\n{}\n", outcome_label(s.outcome), s.report.to_markdown()));
            for n in &s.notes {
                out.push_str(&format!("- {n}\n"));
            }
        }
        out.push_str("\n## Sample flow\n\n");
        out.push_str(flow);
        out
    }
}

/// Computes every report section and writes the bundle into `dir`.
pub fn write_report(inp: &ReportInputs, dir: &Path) -> Result<ReportBundle, PipelineError> {
    let opts = &inp.cfg.analysis;
    let effects = effects_table(inp)?;
    let mut bundle = ReportBundle {
        effects,
        cates: Vec::new(),
        heterogeneity: Vec::new(),
        overlap: Vec::new(),
        sensitivity: Vec::new(),
    };
    let by_unit = rows_by_unit(inp.rows);
    for r in inp.results {
        let o = r.outcome.as_str();
        bundle.cates.push(cate_summary(r.outcome, &r.tau));
        let pp: Vec<f64> = r.tau.iter().map(|t| 100.0 * t).collect();
        write_file(&dir.join(format!("cate_histogram_{o}.csv")), histogram_csv(&pp, opts.cate_histogram_bins))?;
        let mut units = String::from("unit_id,student_id,z,e_hat,cate_pp,mastery\n");
        for i in 0..r.unit_ids.len() {
            let mastery = by_unit[r.unit_ids[i].as_str()]
                .features
                .as_ref()
                .map(|f| f.p_current.to_string())
                .unwrap_or_default();
            units.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.unit_ids[i], r.student_ids[i], r.z[i], r.nuisance.e_hat[i], pp[i], mastery
            ));
        }
        write_file(&dir.join(format!("cates_{o}.csv")), units)?;

        let het = heterogeneity(inp, r)?;
        for q in &het.quartiles {
            write_file(&dir.join(format!("quartiles_{o}_{}.csv", q.variable)), q.to_csv())?;
        }
        bundle.heterogeneity.push(het);

        let [lo, hi] = opts.trim;
        let (trimmed, overlap) = trimmed_effect(r, lo, hi)?;
        write_file(&dir.join(format!("propensity_{o}.csv")), overlap.histogram_csv())?;
        bundle.overlap.push(OverlapSection {
            outcome: r.outcome,
            overlap,
            untrimmed: r.ate.clone(),
            trimmed,
        });
        bundle.sensitivity.push(sensitivity(inp, r)?);
    }
    let flow = inp.samples.flow.to_markdown();
    write_file(&dir.join("effects.md"), bundle.effects.to_markdown())?;
    write_json(&dir.join("effects.json"), &bundle.effects)?;
    write_json(&dir.join("cate_summary.json"), &bundle.cates)?;
    write_json(&dir.join("heterogeneity.json"), &bundle.heterogeneity)?;
    write_json(&dir.join("overlap.json"), &bundle.overlap)?;
    write_json(&dir.join("sensitivity.json"), &bundle.sensitivity)?;
    write_file(&dir.join("flow.md"), &flow)?;
    write_json(&dir.join("flow.json"), &inp.samples.flow)?;
    write_file(&dir.join("report.md"), bundle.to_markdown(&flow))?;
    Ok(bundle)
}

/// SHA-256 over the sorted `(relative path, file digest)` list of `dir`.
pub fn dir_digest(dir: &Path) -> Result<String, PipelineError> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<(), PipelineError> {
        let io = |source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        };
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let bytes = fs::read(&path).map_err(|source| PipelineError::Io {
                    path: path.clone(),
                    source,
                })?;
                let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
                out.push((rel, sha256_hex(&bytes)));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let listing: String = files.iter().map(|(p, d)| format!("{p} {d}\n")).collect();
    Ok(sha256_hex(listing.as_bytes()))
}

/// Writes `manifest.json` with the config snapshot, versions and the
/// digests of every stage directory. Wall times live in `timings.json`
/// at the run root so the bundle stays reproducible.
pub fn write_manifest(ws: &Workspace, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let mut snapshot = serde_json::to_value(cfg).expect("config serializes");
    if let Some(paths) = snapshot.get_mut("paths").and_then(|p| p.as_object_mut()) {
        paths.remove("out");
    }
    let mut digests = BTreeMap::new();
    for stage in Stage::ALL {
        if stage == Stage::Analyze {
            continue;
        }
        let d = ws.stage_dir(stage);
        if d.exists() {
            digests.insert(stage.name(), dir_digest(&d)?);
        }
    }
    digests.insert(Stage::Analyze.name(), dir_digest(dir)?);
    let manifest = serde_json::json!({
        "config": snapshot,
        "versions": {
            "causal-kt": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": crate::checkpoint::VERSION,
        },
        "digests": digests,
        "wall_times": "timings.json",
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let v = [0.0, 0.1, 0.5, 0.99, 1.0];
        let csv = histogram_csv(&v, 4);
        let total: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, v.len());
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn cate_summary_in_pp() {
        let s = cate_summary(Outcome::Immediate, &[0.01, 0.03, 0.05]);
        assert!((s.mean - 3.0).abs() < 1e-12);
        assert!((s.sd - 2.0).abs() < 1e-12);
        assert_eq!((s.min, s.max), (1.0, 5.0));
    }

    #[test]
    fn bonferroni_family_is_row_count() {
        let est = |p: f64| EffectEstimate {
            estimand: crate::estimators::Estimand::Ate,
            estimate: 1.0,
            ci_low: 0.0,
            ci_high: 2.0,
            std_error: 0.5,
            n_units: 10,
            n_clusters: 5,
            p_value: p,
            p_value_adjusted: None,
        };
        let row = |p| EffectRow {
            key: "k".into(),
            label: "l".into(),
            outcome: Outcome::Immediate,
            ate: est(p),
            att: est(p),
            naive_pp: 0.0,
        };
        let t = EffectsTable::from_rows(vec![row(0.01), row(0.02), row(0.5)], BTreeMap::new());
        assert_eq!(t.family_size, 3);
        assert!((t.rows[0].ate.p_value_adjusted.unwrap() - 0.03).abs() < 1e-15);
        assert_eq!(t.rows[2].att.p_value_adjusted, Some(1.0));
        assert!(t.to_markdown().contains("| l | 1.00* (0.00, 2.00)"));
    }
}
