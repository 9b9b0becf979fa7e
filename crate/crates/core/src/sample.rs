//! Analytic sample construction.
//!
//! Every tutored attempt with a following untutored attempt becomes a treated
//! row. Students who were never tutored are split into a holdout pool (used
//! only to train the knowledge tracer) and a control pool; every control
//! attempt on a problem that also carries a treated row becomes a control
//! row. Stage-by-stage counts are kept in a [`SampleFlowReport`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dkt::KnowledgeFeatures;
use crate::events::{EventLog, InteractionEvent, SessionMeta};
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("no tutored attempt with an available outcome")]
    EmptyTreatmentSample,
    #[error("degenerate holdout split: {0}")]
    DegenerateSplit(String),
    #[error("invalid sample policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ControlMode {
    NeverTreated,
    /// Also admit attempts of previously tutored students once more than
    /// `k_skills` distinct skills separate them from the last session.
    Washout { k_skills: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplePolicy {
    pub control_mode: ControlMode,
    pub holdout_fraction: f64,
    pub placebo_offset: usize,
    pub restrict_to_treated_problems: bool,
    pub seed: u64,
}

impl Default for SamplePolicy {
    fn default() -> Self {
        SamplePolicy {
            control_mode: ControlMode::NeverTreated,
            holdout_fraction: 0.5,
            placebo_offset: 3,
            restrict_to_treated_problems: true,
            seed: 0,
        }
    }
}

impl SamplePolicy {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(SampleError::InvalidPolicy("holdout_fraction must be in (0, 1)".into()));
        }
        if self.placebo_offset < 1 {
            return Err(SampleError::InvalidPolicy("placebo_offset must be >= 1".into()));
        }
        Ok(())
    }
}

/// One causal unit anchored at an attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRow {
    pub unit_id: String,
    pub student_id: String,
    pub anchor_seq: usize,
    pub problem_id: String,
    pub skill_id: String,
    /// 1 if tutoring happened on the anchor attempt.
    pub z: u8,
    /// Next attempt made without help.
    pub y_next: Option<bool>,
    pub next_seq: Option<usize>,
    pub next_skill_id: Option<String>,
    /// First attempt on a skill different from the anchor's.
    pub y_skill: Option<bool>,
    pub skill_seq: Option<usize>,
    /// Correctness `placebo_offset` attempts before the anchor.
    pub y_placebo: Option<bool>,
    pub session: Option<SessionMeta>,
    /// Admitted as a control through the washout rule.
    #[serde(default)]
    pub washout: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<KnowledgeFeatures>,
}

impl AnalyticRow {
    pub fn treated(&self) -> bool {
        self.z == 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub students: usize,
    pub attempts: usize,
    pub problems: usize,
}

impl FlowCounts {
    fn of<'a>(events: impl Iterator<Item = &'a InteractionEvent>) -> FlowCounts {
        let mut students = BTreeSet::new();
        let mut problems = BTreeSet::new();
        let mut attempts = 0;
        for e in events {
            students.insert(e.student_id.as_str());
            problems.insert(e.problem_id.as_str());
            attempts += 1;
        }
        FlowCounts {
            students: students.len(),
            attempts,
            problems: problems.len(),
        }
    }

    fn minus(&self, other: &FlowCounts) -> FlowCounts {
        FlowCounts {
            students: self.students - other.students,
            attempts: self.attempts - other.attempts,
            problems: self.problems - other.problems,
        }
    }
}

/// Counts at each construction stage, laid out like a CONSORT-style flow.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleFlowReport {
    pub original: FlowCounts,
    pub treatment_usage: FlowCounts,
    pub treatment_excluded: FlowCounts,
    pub final_treated: FlowCounts,
    pub control_usage: FlowCounts,
    pub holdout: FlowCounts,
    pub control_analysis: FlowCounts,
    pub control_excluded: FlowCounts,
    pub final_control: FlowCounts,
    /// Attempts of previously tutored students admitted by the washout rule.
    pub washout_admitted: Option<FlowCounts>,
    pub total: FlowCounts,
    /// Attempt-level exclusion counts by reason.
    pub exclusion_reasons: BTreeMap<String, usize>,
}

impl SampleFlowReport {
    /// Lists every accounting identity the report violates.
    pub fn check(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut eq = |name: &str, lhs: usize, rhs: usize| {
            if lhs != rhs {
                bad.push(format!("{name}: {lhs} != {rhs}"));
            }
        };
        let o = &self.original;
        let (t, c) = (&self.treatment_usage, &self.control_usage);
        eq("original students = treatment + control usage", o.students, t.students + c.students);
        eq("original attempts = treatment + control usage", o.attempts, t.attempts + c.attempts);
        for (name, prev, excl, fin) in [
            ("treated", t, &self.treatment_excluded, &self.final_treated),
            ("control", &self.control_analysis, &self.control_excluded, &self.final_control),
        ] {
            eq(&format!("{name} students kept + excluded"), fin.students + excl.students, prev.students);
            eq(&format!("{name} attempts kept + excluded"), fin.attempts + excl.attempts, prev.attempts);
            eq(&format!("{name} problems kept + excluded"), fin.problems + excl.problems, prev.problems);
        }
        let h = &self.holdout;
        let ca = &self.control_analysis;
        eq("control usage students = holdout + analysis", c.students, h.students + ca.students);
        eq("control usage attempts = holdout + analysis", c.attempts, h.attempts + ca.attempts);
        let w = self.washout_admitted.unwrap_or_default();
        eq(
            "total attempts = treated + control (+ washout)",
            self.total.attempts,
            self.final_treated.attempts + self.final_control.attempts + w.attempts,
        );
        if self.washout_admitted.is_none() {
            eq(
                "total students = treated + control",
                self.total.students,
                self.final_treated.students + self.final_control.students,
            );
        }
        bad
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| | Students | Problem Attempts | Unique Problems |");
        let _ = writeln!(s, "|---|---:|---:|---:|");
        let row = |s: &mut String, label: &str, c: &FlowCounts, paren: bool| {
            let f = |v: usize| {
                if paren {
                    format!("({})", group(v))
                } else {
                    group(v)
                }
            };
            let _ = writeln!(s, "| {label} | {} | {} | {} |", f(c.students), f(c.attempts), f(c.problems));
        };
        row(&mut s, "**Original Usage Data**", &self.original, false);
        let _ = writeln!(s, "| *Treatment Sample* | | | |");
        row(&mut s, "All Treatment Usage", &self.treatment_usage, false);
        row(&mut s, "&nbsp;&nbsp;*Excluded*", &self.treatment_excluded, true);
        row(&mut s, "**Final Analytic Treated**", &self.final_treated, false);
        let _ = writeln!(s, "| *Control Sample* | | | |");
        row(&mut s, "All Control Usage", &self.control_usage, false);
        row(&mut s, "DKT Training Holdout", &self.holdout, false);
        row(&mut s, "Control Analysis", &self.control_analysis, false);
        row(&mut s, "&nbsp;&nbsp;*Excluded*", &self.control_excluded, true);
        row(&mut s, "**Final Analytic Control**", &self.final_control, false);
        if let Some(w) = &self.washout_admitted {
            row(&mut s, "Washout Controls Admitted", w, false);
        }
        row(&mut s, "**Total Analytic Sample**", &self.total, false);
        s
    }
}

fn group(v: usize) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Samples {
    pub treated: Vec<AnalyticRow>,
    pub control: Vec<AnalyticRow>,
    pub holdout: EventLog,
    pub flow: SampleFlowReport,
}

impl Samples {
    /// Treated and control rows in canonical `(student_id, anchor_seq)` order.
    pub fn all_rows(&self) -> Vec<AnalyticRow> {
        let mut rows: Vec<AnalyticRow> = self.treated.iter().chain(&self.control).cloned().collect();
        sort_rows(&mut rows);
        rows
    }
}

pub fn sort_rows(rows: &mut [AnalyticRow]) {
    rows.sort_by(|a, b| {
        (a.student_id.as_str(), a.anchor_seq).cmp(&(b.student_id.as_str(), b.anchor_seq))
    });
}

fn make_row(log: &EventLog, evs: &[InteractionEvent], t: usize) -> AnalyticRow {
    let a = &evs[t];
    let next = evs[t + 1..].iter().find(|e| !e.tutored);
    let skill = evs[t + 1..].iter().find(|e| e.skill_id != a.skill_id);
    AnalyticRow {
        unit_id: format!("{}#{}", a.student_id, a.seq_index),
        student_id: a.student_id.clone(),
        anchor_seq: a.seq_index,
        problem_id: a.problem_id.clone(),
        skill_id: a.skill_id.clone(),
        z: a.tutored as u8,
        y_next: next.map(|e| e.correct),
        next_seq: next.map(|e| e.seq_index),
        next_skill_id: next.map(|e| e.skill_id.clone()),
        y_skill: skill.map(|e| e.correct),
        skill_seq: skill.map(|e| e.seq_index),
        y_placebo: None,
        session: a
            .session_id
            .as_ref()
            .and_then(|s| log.sessions().get(s))
            .cloned(),
        washout: false,
        features: None,
    }
}

/// Number of distinct skills attempted strictly between the last tutored
/// attempt before `t` and `t`. `None` if nothing before `t` was tutored.
pub fn washout_distance(evs: &[InteractionEvent], t: usize) -> Option<usize> {
    let last = evs[..t].iter().rposition(|e| e.tutored)?;
    let skills: BTreeSet<&str> = evs[last + 1..t].iter().map(|e| e.skill_id.as_str()).collect();
    Some(skills.len())
}

/// Builds treated, control and holdout samples.
pub fn build_samples(log: &EventLog, policy: &SamplePolicy) -> Result<Samples, SampleError> {
    policy.validate()?;
    let ever_treated: BTreeSet<&str> = log
        .students()
        .filter(|(_, evs)| evs.iter().any(|e| e.tutored))
        .map(|(id, _)| id)
        .collect();
    if ever_treated.is_empty() {
        return Err(SampleError::EmptyTreatmentSample);
    }

    let mut never: Vec<&str> = log
        .student_ids()
        .filter(|id| !ever_treated.contains(id))
        .collect();
    let mut rng = seeds::stream(policy.seed, "holdout-split", 0);
    never.shuffle(&mut rng);
    let n_hold = ((never.len() as f64) * policy.holdout_fraction).round() as usize;
    let holdout_ids: BTreeSet<&str> = never[..n_hold].iter().copied().collect();
    let control_ids: BTreeSet<&str> = never[n_hold..].iter().copied().collect();
    if holdout_ids.is_empty() || control_ids.is_empty() {
        return Err(SampleError::DegenerateSplit(format!(
            "{} never-treated students give {} holdout / {} control",
            never.len(),
            holdout_ids.len(),
            control_ids.len()
        )));
    }

    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut bump = |k: &str, n: usize| *reasons.entry(k.to_string()).or_default() += n;

    let mut treated = Vec::new();
    let mut control = Vec::new();
    let mut washout = Vec::new();
    for (sid, evs) in log.students() {
        if ever_treated.contains(sid) {
            for t in 0..evs.len() {
                if evs[t].tutored {
                    let row = make_row(log, evs, t);
                    if row.y_next.is_some() {
                        treated.push(row);
                    } else {
                        bump("treated_no_outcome", 1);
                    }
                } else if let ControlMode::Washout { k_skills } = policy.control_mode {
                    match washout_distance(evs, t) {
                        Some(d) if d > k_skills => {
                            let mut row = make_row(log, evs, t);
                            if row.y_next.is_some() {
                                row.washout = true;
                                washout.push(row);
                            } else {
                                bump("treated_student_untutored", 1);
                            }
                        }
                        _ => bump("treated_student_untutored", 1),
                    }
                } else {
                    bump("treated_student_untutored", 1);
                }
            }
        } else if control_ids.contains(sid) {
            for t in 0..evs.len() {
                let row = make_row(log, evs, t);
                if row.y_next.is_some() {
                    control.push(row);
                } else {
                    bump("control_no_outcome", 1);
                }
            }
        }
    }

    if policy.restrict_to_treated_problems {
        let tp: BTreeSet<String> = treated.iter().map(|r| r.problem_id.clone()).collect();
        let cp: BTreeSet<String> = control
            .iter()
            .chain(&washout)
            .map(|r| r.problem_id.clone())
            .collect();
        let shared: BTreeSet<&String> = tp.intersection(&cp).collect();
        let before = (treated.len(), control.len(), washout.len());
        treated.retain(|r| shared.contains(&r.problem_id));
        control.retain(|r| shared.contains(&r.problem_id));
        washout.retain(|r| shared.contains(&r.problem_id));
        bump("treated_problem_not_shared", before.0 - treated.len());
        bump("control_problem_not_shared", before.1 - control.len());
        if before.2 > 0 {
            bump("washout_problem_not_shared", before.2 - washout.len());
        }
    }
    if treated.is_empty() {
        return Err(SampleError::EmptyTreatmentSample);
    }
    let offset = policy.placebo_offset;
    treated = link_placebo(treated, log, offset);
    control = link_placebo(control, log, offset);
    washout = link_placebo(washout, log, offset);

    let anchor_events = |rows: &[AnalyticRow]| -> FlowCounts {
        FlowCounts::of(
            rows.iter()
                .filter_map(|r| log.event(&r.student_id, r.anchor_seq)),
        )
    };
    let original = FlowCounts::of(log.events().iter());
    let treatment_usage = FlowCounts::of(
        log.events()
            .iter()
            .filter(|e| ever_treated.contains(e.student_id.as_str())),
    );
    let final_treated = anchor_events(&treated);
    let control_usage = FlowCounts::of(
        log.events()
            .iter()
            .filter(|e| !ever_treated.contains(e.student_id.as_str())),
    );
    let holdout_c = FlowCounts::of(
        log.events()
            .iter()
            .filter(|e| holdout_ids.contains(e.student_id.as_str())),
    );
    let control_analysis = FlowCounts::of(
        log.events()
            .iter()
            .filter(|e| control_ids.contains(e.student_id.as_str())),
    );
    let final_control = anchor_events(&control);
    let washout_admitted = match policy.control_mode {
        ControlMode::Washout { .. } => Some(anchor_events(&washout)),
        ControlMode::NeverTreated => None,
    };
    let mut all: Vec<AnalyticRow> = treated.iter().chain(&control).chain(&washout).cloned().collect();
    sort_rows(&mut all);
    let total = anchor_events(&all);

    let flow = SampleFlowReport {
        original,
        treatment_usage,
        treatment_excluded: treatment_usage.minus(&final_treated),
        final_treated,
        control_usage,
        holdout: holdout_c,
        control_analysis,
        control_excluded: control_analysis.minus(&final_control),
        final_control,
        washout_admitted,
        total,
        exclusion_reasons: reasons,
    };

    control.extend(washout);
    sort_rows(&mut treated);
    sort_rows(&mut control);
    let holdout = log.subset(|id| holdout_ids.contains(id), "holdout");
    Ok(Samples {
        treated,
        control,
        holdout,
        flow,
    })
}

/// Fills `y_placebo` from the attempt `offset` positions before each anchor.
pub fn link_placebo(mut rows: Vec<AnalyticRow>, log: &EventLog, offset: usize) -> Vec<AnalyticRow> {
    for r in &mut rows {
        r.y_placebo = r
            .anchor_seq
            .checked_sub(offset)
            .and_then(|s| log.event(&r.student_id, s))
            .map(|e| e.correct);
    }
    rows
}
