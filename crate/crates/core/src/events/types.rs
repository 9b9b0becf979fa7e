use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One timestamped problem attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub student_id: String,
    pub seq_index: usize,
    /// Epoch milliseconds.
    pub timestamp: i64,
    pub problem_id: String,
    pub skill_id: String,
    pub correct: bool,
    /// Tutoring occurred on this attempt.
    pub tutored: bool,
    pub session_id: Option<String>,
    /// Unknown input columns, carried through untouched.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, String>,
}

/// Descriptive statistics of one tutoring session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub messages_total: u32,
    pub tutor_messages: u32,
    pub student_messages: u32,
    pub duration_minutes: f64,
    pub student_word_share: f64,
    pub prior_session_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    A,
    B,
    C,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim() {
            "A" | "a" => Some(Gender::A),
            "B" | "b" => Some(Gender::B),
            "C" | "c" => Some(Gender::C),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::A => "A",
            Gender::B => "B",
            Gender::C => "C",
        }
    }
}

/// Optional per-student covariates collected outside the platform.
///
/// Missing values stay `None`; nothing is imputed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentContext {
    pub student_id: String,
    pub pretest_score: Option<f64>,
    pub gender: Option<Gender>,
    pub low_ses_flag: Option<bool>,
    pub school_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub format: String,
    pub rows_in: usize,
    pub kept: usize,
    pub dropped_malformed: usize,
    pub deduplicated: usize,
}

/// The full, immutable interaction log.
///
/// Events are stored grouped by student (ascending `student_id`) and ordered
/// by `seq_index` within each student.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    events: Vec<InteractionEvent>,
    sessions: BTreeMap<String, SessionMeta>,
    context: BTreeMap<String, StudentContext>,
    provenance: Provenance,
    index: BTreeMap<String, Range<usize>>,
}

impl EventLog {
    /// Builds a log from events that are already in canonical order
    /// (grouped by student, `seq_index` ascending from 0).
    ///
    /// Panics if the order is not canonical; use the ingestion path for raw data.
    pub fn from_sorted(
        events: Vec<InteractionEvent>,
        sessions: BTreeMap<String, SessionMeta>,
        context: BTreeMap<String, StudentContext>,
        provenance: Provenance,
    ) -> EventLog {
        let index = build_index(&events);
        EventLog {
            events,
            sessions,
            context,
            provenance,
            index,
        }
    }

    /// Sorts per student by `(timestamp, problem_id, input order)` and
    /// reassigns `seq_index`.
    pub fn from_unsorted(
        mut events: Vec<InteractionEvent>,
        sessions: BTreeMap<String, SessionMeta>,
        context: BTreeMap<String, StudentContext>,
        provenance: Provenance,
    ) -> EventLog {
        // stable sort keeps input order as the last tie-break
        events.sort_by(|a, b| {
            a.student_id
                .cmp(&b.student_id)
                .then(a.timestamp.cmp(&b.timestamp))
                .then_with(|| a.problem_id.cmp(&b.problem_id))
        });
        let mut current: Option<&str> = None;
        let mut next = 0usize;
        let mut seqs = Vec::with_capacity(events.len());
        for ev in &events {
            if current != Some(ev.student_id.as_str()) {
                current = Some(ev.student_id.as_str());
                next = 0;
            }
            seqs.push(next);
            next += 1;
        }
        for (ev, s) in events.iter_mut().zip(seqs) {
            ev.seq_index = s;
        }
        Self::from_sorted(events, sessions, context, provenance)
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn sessions(&self) -> &BTreeMap<String, SessionMeta> {
        &self.sessions
    }

    pub fn context(&self) -> &BTreeMap<String, StudentContext> {
        &self.context
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn n_students(&self) -> usize {
        self.index.len()
    }

    pub fn student_ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(|s| s.as_str())
    }

    /// Events of one student in sequence order.
    pub fn student(&self, student_id: &str) -> Option<&[InteractionEvent]> {
        self.index.get(student_id).map(|r| &self.events[r.clone()])
    }

    /// `(student_id, events)` for every student in ascending id order.
    pub fn students(&self) -> impl Iterator<Item = (&str, &[InteractionEvent])> {
        self.index
            .iter()
            .map(move |(id, r)| (id.as_str(), &self.events[r.clone()]))
    }

    /// Event lookup by `(student_id, seq_index)`.
    pub fn event(&self, student_id: &str, seq_index: usize) -> Option<&InteractionEvent> {
        self.student(student_id).and_then(|s| s.get(seq_index))
    }

    /// Restricts the log to a subset of students, keeping their sessions and
    /// context rows.
    pub fn subset<F: Fn(&str) -> bool>(&self, keep: F, source: &str) -> EventLog {
        let events: Vec<InteractionEvent> = self
            .students()
            .filter(|(id, _)| keep(id))
            .flat_map(|(_, evs)| evs.iter().cloned())
            .collect();
        let sessions = events
            .iter()
            .filter_map(|e| e.session_id.as_ref())
            .filter_map(|sid| self.sessions.get(sid).map(|m| (sid.clone(), m.clone())))
            .collect();
        let context = self
            .context
            .iter()
            .filter(|(id, _)| keep(id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let n = events.len();
        EventLog::from_sorted(
            events,
            sessions,
            context,
            Provenance {
                source: source.to_string(),
                format: "derived".to_string(),
                rows_in: n,
                kept: n,
                dropped_malformed: 0,
                deduplicated: 0,
            },
        )
    }

    /// Replaces the student-context table.
    pub fn with_context(mut self, context: BTreeMap<String, StudentContext>) -> EventLog {
        self.context = context;
        self
    }

    /// Replaces the session table.
    pub fn with_sessions(mut self, sessions: BTreeMap<String, SessionMeta>) -> EventLog {
        self.sessions = sessions;
        self
    }

    /// Same events, sessions and context (provenance ignored).
    pub fn same_content(&self, other: &EventLog) -> bool {
        self.events == other.events && self.sessions == other.sessions && self.context == other.context
    }
}

fn build_index(events: &[InteractionEvent]) -> BTreeMap<String, Range<usize>> {
    let mut index: BTreeMap<String, Range<usize>> = BTreeMap::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].student_id != events[start].student_id {
            let id = events[start].student_id.clone();
            if let Some((last, _)) = index.last_key_value() {
                assert!(*last < id, "students are not in ascending id order at {id}");
            }
            index.insert(id.clone(), start..i);
            for (k, ev) in events[start..i].iter().enumerate() {
                assert_eq!(ev.seq_index, k, "seq_index of student {id} is not contiguous");
            }
            start = i;
        }
    }
    index
}
