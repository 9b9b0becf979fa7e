use serde::{Deserialize, Serialize};

use super::types::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    /// An event references a session id missing from the session table.
    OrphanSession,
    /// Timestamps decrease along a student's sequence.
    NonMonotoneTimestamp,
    /// A student has fewer than two events.
    ShortSequence,
    /// `tutor_messages + student_messages != messages_total`.
    SessionMessageMismatch,
    /// `student_word_share` outside `[0, 1]`.
    WordShareOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub student_id: Option<String>,
    pub seq_index: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_events: usize,
    pub n_students: usize,
    pub n_sessions: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Lists invariant violations of a log. Never mutates or rejects it.
pub fn validate_log(log: &EventLog) -> ValidationReport {
    let mut violations = Vec::new();
    for (sid, evs) in log.students() {
        if evs.len() < 2 {
            violations.push(Violation {
                kind: ViolationKind::ShortSequence,
                student_id: Some(sid.to_string()),
                seq_index: None,
                detail: format!("{} event(s)", evs.len()),
            });
        }
        for w in evs.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                violations.push(Violation {
                    kind: ViolationKind::NonMonotoneTimestamp,
                    student_id: Some(sid.to_string()),
                    seq_index: Some(w[1].seq_index),
                    detail: format!("{} after {}", w[1].timestamp, w[0].timestamp),
                });
            }
        }
        for ev in evs {
            if let Some(session) = &ev.session_id {
                if !log.sessions().contains_key(session) {
                    violations.push(Violation {
                        kind: ViolationKind::OrphanSession,
                        student_id: Some(sid.to_string()),
                        seq_index: Some(ev.seq_index),
                        detail: format!("session `{session}` not in session table"),
                    });
                }
            }
        }
    }
    for meta in log.sessions().values() {
        if meta.tutor_messages + meta.student_messages != meta.messages_total {
            violations.push(Violation {
                kind: ViolationKind::SessionMessageMismatch,
                student_id: None,
                seq_index: None,
                detail: format!(
                    "session `{}`: {} + {} != {}",
                    meta.session_id, meta.tutor_messages, meta.student_messages, meta.messages_total
                ),
            });
        }
        if !(0.0..=1.0).contains(&meta.student_word_share) {
            violations.push(Violation {
                kind: ViolationKind::WordShareOutOfRange,
                student_id: None,
                seq_index: None,
                detail: format!("session `{}`: {}", meta.session_id, meta.student_word_share),
            });
        }
    }
    ValidationReport {
        n_events: log.events().len(),
        n_students: log.n_students(),
        n_sessions: log.sessions().len(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::events::{InteractionEvent, Provenance, SessionMeta};

    fn ev(student: &str, ts: i64, session: Option<&str>) -> InteractionEvent {
        InteractionEvent {
            student_id: student.into(),
            seq_index: 0,
            timestamp: ts,
            problem_id: "p".into(),
            skill_id: "k".into(),
            correct: true,
            tutored: session.is_some(),
            session_id: session.map(|s| s.to_string()),
            extras: BTreeMap::new(),
        }
    }

    fn session(id: &str) -> SessionMeta {
        SessionMeta {
            session_id: id.into(),
            messages_total: 14,
            tutor_messages: 8,
            student_messages: 6,
            duration_minutes: 4.2,
            student_word_share: 0.3,
            prior_session_count: 0,
        }
    }

    #[test]
    fn orphan_session_is_flagged_once() {
        let log = EventLog::from_unsorted(
            vec![ev("a", 1, None), ev("a", 2, Some("x")), ev("a", 3, Some("y"))],
            [("y".to_string(), session("y"))].into_iter().collect(),
            BTreeMap::new(),
            Provenance::default(),
        );
        let rep = validate_log(&log);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.count(ViolationKind::OrphanSession), 1);
    }

    #[test]
    fn clean_log_has_no_violations() {
        let log = EventLog::from_unsorted(
            vec![ev("a", 1, None), ev("a", 2, None), ev("b", 1, None), ev("b", 5, None)],
            BTreeMap::new(),
            BTreeMap::new(),
            Provenance::default(),
        );
        assert!(validate_log(&log).is_clean());
    }

    #[test]
    fn bad_session_rows_are_flagged() {
        let mut s = session("x");
        s.tutor_messages = 9;
        s.student_word_share = 1.5;
        let log = EventLog::from_unsorted(
            vec![ev("a", 1, Some("x")), ev("a", 2, None)],
            [("x".to_string(), s)].into_iter().collect(),
            BTreeMap::new(),
            Provenance::default(),
        );
        let rep = validate_log(&log);
        assert_eq!(rep.count(ViolationKind::SessionMessageMismatch), 1);
        assert_eq!(rep.count(ViolationKind::WordShareOutOfRange), 1);
    }
}
