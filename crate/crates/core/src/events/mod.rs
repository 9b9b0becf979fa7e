//! Event-log domain types, ingestion and validation.
//!
//! An [`EventLog`] holds every problem attempt of every student, sorted per
//! student by `(timestamp, problem_id, input order)` with a contiguous
//! 0-based `seq_index`. Tutoring session metadata and optional student
//! context tables hang off the log by id.

mod ingest;
mod types;
mod validate;

pub use ingest::{
    emit_events, ingest_context, ingest_events, ingest_events_with, ingest_sessions, parse_bool,
    write_context, write_sessions, Format, IngestError, IngestOptions, MalformedPolicy,
};
pub use types::{
    EventLog, Gender, InteractionEvent, Provenance, SessionMeta, StudentContext,
};
pub use validate::{validate_log, ValidationReport, Violation, ViolationKind};
