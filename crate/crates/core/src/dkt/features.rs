use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DktModel;
use crate::events::{EventLog, InteractionEvent};
use crate::sample::AnalyticRow;

/// Pre-treatment covariates of one analytic row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeFeatures {
    /// Hidden state after every attempt before the anchor.
    pub h: Vec<f64>,
    pub p_current: f64,
    pub p_next: f64,
    /// Fraction correct before the anchor; 0.5 with no history.
    pub cum_accuracy: f64,
}

impl KnowledgeFeatures {
    /// `[h..., p_current, p_next, cum_accuracy]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.h.clone();
        v.extend([self.p_current, self.p_next, self.cum_accuracy]);
        v
    }
}

pub fn feature_names(hidden: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=hidden).map(|k| format!("H_{k}")).collect();
    names.extend(["p_current", "p_next", "cum_accuracy"].map(String::from));
    names
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractDiagnostics {
    pub rows: usize,
    /// Rows whose anchor or outcome skill is outside the training vocabulary.
    pub unknown_skill: usize,
    /// History attempts on items outside the training vocabulary.
    pub unknown_item_events: usize,
    /// Rows whose anchor is missing from the log; their features stay empty.
    pub missing_anchor: usize,
}

fn skill_slot(model: &DktModel, skill: &str, unknown: &mut bool) -> usize {
    model.vocab.skill(skill).unwrap_or_else(|| {
        *unknown = true;
        0
    })
}

/// Features for an anchor preceded by `history`.
pub fn features_at(
    model: &DktModel,
    history: &[InteractionEvent],
    anchor_skill: &str,
    next_skill: &str,
) -> (KnowledgeFeatures, bool) {
    let seq = model.vocab.encode(history);
    let mut state = model.initial_state();
    for &tok in &seq.tokens {
        state = model.step(&state, tok);
    }
    let mut unknown = false;
    let sc = skill_slot(model, anchor_skill, &mut unknown);
    let sn = skill_slot(model, next_skill, &mut unknown);
    (
        KnowledgeFeatures {
            p_current: model.predict(&state.h, sc),
            p_next: model.predict(&state.h, sn),
            cum_accuracy: cum_accuracy(history),
            h: state.h,
        },
        unknown,
    )
}

fn cum_accuracy(history: &[InteractionEvent]) -> f64 {
    if history.is_empty() {
        0.5
    } else {
        history.iter().filter(|e| e.correct).count() as f64 / history.len() as f64
    }
}

/// Fills `features` of every row by replaying the student's history up to,
/// but excluding, the anchor attempt.
pub fn extract_features(
    model: &DktModel,
    mut rows: Vec<AnalyticRow>,
    log: &EventLog,
) -> (Vec<AnalyticRow>, ExtractDiagnostics) {
    let mut by_student: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_student.entry(r.student_id.as_str()).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = by_student.into_iter().collect();
    let results: Vec<Vec<(usize, Option<KnowledgeFeatures>, bool, usize)>> = groups
        .par_iter()
        .map(|(sid, idx)| {
            let Some(evs) = log.student(sid) else {
                return idx.iter().map(|&i| (i, None, false, 0)).collect();
            };
            let max_anchor = idx.iter().map(|&i| rows[i].anchor_seq).max().unwrap_or(0).min(evs.len());
            let seq = model.vocab.encode(&evs[..max_anchor]);
            // hs[t] is the hidden state after consuming t attempts
            let mut hs = Vec::with_capacity(max_anchor + 1);
            let mut state = model.initial_state();
            hs.push(state.h.clone());
            for &tok in &seq.tokens {
                state = model.step(&state, tok);
                hs.push(state.h.clone());
            }
            let mut correct_before = vec![0usize; max_anchor + 1];
            for t in 0..max_anchor {
                correct_before[t + 1] = correct_before[t] + evs[t].correct as usize;
            }
            idx.iter()
                .map(|&i| {
                    let r = &rows[i];
                    if r.anchor_seq >= evs.len() {
                        return (i, None, false, 0);
                    }
                    let a = r.anchor_seq;
                    let unknown_items = seq.tokens[..a].iter().filter(|&&t| t < 2).count();
                    let mut unknown = false;
                    let sc = skill_slot(model, &r.skill_id, &mut unknown);
                    let next_skill = r.next_skill_id.as_deref().unwrap_or(&r.skill_id);
                    let sn = skill_slot(model, next_skill, &mut unknown);
                    let h = &hs[a];
                    let f = KnowledgeFeatures {
                        h: h.clone(),
                        p_current: model.predict(h, sc),
                        p_next: model.predict(h, sn),
                        cum_accuracy: if a == 0 {
                            0.5
                        } else {
                            correct_before[a] as f64 / a as f64
                        },
                    };
                    (i, Some(f), unknown, unknown_items)
                })
                .collect()
        })
        .collect();

    let mut diag = ExtractDiagnostics {
        rows: rows.len(),
        ..Default::default()
    };
    for group in results {
        for (i, f, unknown, unknown_items) in group {
            if f.is_none() {
                diag.missing_anchor += 1;
            }
            diag.unknown_skill += unknown as usize;
            diag.unknown_item_events += unknown_items;
            rows[i].features = f;
        }
    }
    (rows, diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dkt::{DktConfig, Vocab};
    use crate::sim::{SimConfig, simulate_population};
    use crate::sample::{SamplePolicy, build_samples};

    fn setup() -> (DktModel, EventLog, Vec<AnalyticRow>) {
        let cfg = SimConfig {
            n_students: 120,
            n_problems: 60,
            n_skills: 8,
            ..SimConfig::default()
        };
        let (log, _) = simulate_population(&cfg).unwrap();
        let s = build_samples(&log, &SamplePolicy::default()).unwrap();
        let dcfg = DktConfig {
            hidden_dim: 6,
            embed_dim: 4,
            max_seq_len: 7,
            ..DktConfig::default()
        };
        let model = DktModel::init(Vocab::from_log(&s.holdout), &dcfg);
        (model, log, s.all_rows())
    }

    #[test]
    fn matches_independent_replay() {
        let (model, log, rows) = setup();
        let (out, diag) = extract_features(&model, rows, &log);
        assert_eq!(diag.missing_anchor, 0);
        for r in out.iter().step_by(7) {
            let evs = log.student(&r.student_id).unwrap();
            let next = r.next_skill_id.clone().unwrap();
            let (f, _) = features_at(&model, &evs[..r.anchor_seq], &r.skill_id, &next);
            assert_eq!(r.features.as_ref().unwrap(), &f);
            assert_eq!(f.to_vec().len(), 9);
        }
    }

    #[test]
    fn first_attempt_uses_initial_state() {
        let (model, log, mut rows) = setup();
        rows.truncate(1);
        rows[0].anchor_seq = 0;
        let (out, _) = extract_features(&model, rows, &log);
        let f = out[0].features.as_ref().unwrap();
        assert!(f.h.iter().all(|&v| v == 0.0));
        assert_eq!(f.cum_accuracy, 0.5);
    }

    #[test]
    fn later_events_do_not_leak() {
        let (model, log, rows) = setup();
        let row = rows.iter().find(|r| r.anchor_seq >= 3).unwrap().clone();
        let (base, _) = extract_features(&model, vec![row.clone()], &log);
        let events: Vec<InteractionEvent> = log
            .events()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if e.student_id == row.student_id && e.seq_index >= row.anchor_seq {
                    e.correct = !e.correct;
                    e.problem_id = "p0000".into();
                }
                e
            })
            .collect();
        let mutated = EventLog::from_sorted(
            events,
            log.sessions().clone(),
            log.context().clone(),
            log.provenance().clone(),
        );
        let (again, _) = extract_features(&model, vec![row], &mutated);
        assert_eq!(base[0].features, again[0].features);
    }

    #[test]
    fn probabilities_strictly_inside_unit_interval() {
        let (model, log, rows) = setup();
        let (out, _) = extract_features(&model, rows, &log);
        for r in &out {
            let f = r.features.as_ref().unwrap();
            assert!(f.p_current > 0.0 && f.p_current < 1.0);
            assert!(f.p_next > 0.0 && f.p_next < 1.0);
        }
    }

    #[test]
    fn unknown_skill_is_counted() {
        let (model, log, mut rows) = setup();
        rows.truncate(2);
        rows[0].skill_id = "never-seen".into();
        let (_, diag) = extract_features(&model, rows, &log);
        assert_eq!(diag.unknown_skill, 1);
    }
}
