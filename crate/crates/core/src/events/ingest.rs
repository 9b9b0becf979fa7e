use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::{EventLog, Gender, InteractionEvent, Provenance, SessionMeta, StudentContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &std::path::Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => Format::Jsonl,
            _ => Format::Csv,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error(
        "line {line}: duplicate event for student `{student_id}` at {timestamp} on problem `{problem_id}` with conflicting correctness"
    )]
    DuplicateEvent {
        line: u64,
        student_id: String,
        timestamp: i64,
        problem_id: String,
    },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What to do with a row that fails to parse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedPolicy {
    /// Abort ingestion with [`IngestError::MalformedRecord`].
    #[default]
    Fail,
    /// Drop the row and count it in the provenance.
    Skip,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub on_malformed: MalformedPolicy,
    pub source: String,
}

/// Parses a boolean cell. Accepts `0`, `1`, `true`, `false` in any case.
pub fn parse_bool(s: &str) -> Option<bool> {
    let t = s.trim();
    if t == "1" || t.eq_ignore_ascii_case("true") {
        Some(true)
    } else if t == "0" || t.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

type Row = BTreeMap<String, String>;

/// Decodes rows into string maps; empty cells and JSON nulls are absent.
fn read_rows<R: Read>(format: Format, source: R) -> Result<Vec<(u64, Row)>, IngestError> {
    let mut out = Vec::new();
    match format {
        Format::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(false)
                .from_reader(source);
            let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
            for rec in rdr.records() {
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        let line = e.position().map(|p| p.line()).unwrap_or(0);
                        return Err(IngestError::MalformedRecord {
                            line,
                            reason: e.to_string(),
                        });
                    }
                };
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                let row = headers
                    .iter()
                    .zip(rec.iter())
                    .filter(|(_, v)| !v.is_empty())
                    .map(|(k, v)| (k.clone(), v.to_string()))
                    .collect();
                out.push((line, row));
            }
        }
        Format::Jsonl => {
            let rdr = BufReader::new(source);
            for (i, line) in rdr.lines().enumerate() {
                let line = line?;
                let lineno = i as u64 + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = match serde_json::from_str(&line) {
                    Ok(v) => v,
                    Err(e) => {
                        out.push((lineno, malformed_marker(e.to_string())));
                        continue;
                    }
                };
                let Some(obj) = value.as_object() else {
                    out.push((lineno, malformed_marker("line is not a JSON object".into())));
                    continue;
                };
                let mut row = Row::new();
                for (k, v) in obj {
                    let s = match v {
                        serde_json::Value::Null => continue,
                        serde_json::Value::String(s) => s.clone(),
                        serde_json::Value::Bool(b) => b.to_string(),
                        serde_json::Value::Number(n) => n.to_string(),
                        other => other.to_string(),
                    };
                    if !s.is_empty() {
                        row.insert(k.clone(), s);
                    }
                }
                out.push((lineno, row));
            }
        }
    }
    Ok(out)
}

const MALFORMED_KEY: &str = "\u{0}malformed";

fn malformed_marker(reason: String) -> Row {
    let mut r = Row::new();
    r.insert(MALFORMED_KEY.to_string(), reason);
    r
}

const EVENT_COLUMNS: [&str; 8] = [
    "student_id",
    "seq_index",
    "timestamp",
    "problem_id",
    "skill_id",
    "correct",
    "tutored",
    "session_id",
];

fn parse_event(row: &Row) -> Result<InteractionEvent, String> {
    if let Some(reason) = row.get(MALFORMED_KEY) {
        return Err(reason.clone());
    }
    let req = |k: &str| row.get(k).ok_or_else(|| format!("missing `{k}`"));
    let timestamp = req("timestamp")?
        .trim()
        .parse::<i64>()
        .map_err(|_| format!("timestamp `{}` is not an integer", row["timestamp"]))?;
    let correct = parse_bool(req("correct")?)
        .ok_or_else(|| format!("correct `{}` is not a boolean", row["correct"]))?;
    let tutored = match row.get("tutored") {
        Some(v) => parse_bool(v).ok_or_else(|| format!("tutored `{v}` is not a boolean"))?,
        None => false,
    };
    let session_id = row.get("session_id").cloned();
    if tutored && session_id.is_none() {
        return Err("tutored attempt without session_id".to_string());
    }
    if let Some(v) = row.get("seq_index") {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("seq_index `{v}` is not a non-negative integer"))?;
    }
    let extras = row
        .iter()
        .filter(|(k, _)| !EVENT_COLUMNS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(InteractionEvent {
        student_id: req("student_id")?.clone(),
        seq_index: 0,
        timestamp,
        problem_id: req("problem_id")?.clone(),
        skill_id: req("skill_id")?.clone(),
        correct,
        tutored,
        session_id,
        extras,
    })
}

fn check_csv_header(bytes: &[u8], required: &[&str]) -> Result<(), IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers: BTreeSet<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for r in required {
        if !headers.contains(*r) {
            return Err(IngestError::MissingColumn(r.to_string()));
        }
    }
    Ok(())
}

/// Reads an event log with default options (fail fast on malformed rows).
pub fn ingest_events<R: Read>(source: R, format: Format) -> Result<EventLog, IngestError> {
    ingest_events_with(source, format, &IngestOptions::default())
}

pub fn ingest_events_with<R: Read>(
    mut source: R,
    format: Format,
    opts: &IngestOptions,
) -> Result<EventLog, IngestError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if format == Format::Csv {
        check_csv_header(
            &bytes,
            &["student_id", "timestamp", "problem_id", "skill_id", "correct"],
        )?;
    }
    let rows = read_rows(format, bytes.as_slice())?;
    let rows_in = rows.len();
    let mut dropped = 0usize;
    let mut deduplicated = 0usize;
    let mut events = Vec::with_capacity(rows_in);
    let mut seen: HashMap<(String, i64, String), bool> = HashMap::new();
    for (line, row) in rows {
        let ev = match parse_event(&row) {
            Ok(ev) => ev,
            Err(reason) => match opts.on_malformed {
                MalformedPolicy::Fail => return Err(IngestError::MalformedRecord { line, reason }),
                MalformedPolicy::Skip => {
                    dropped += 1;
                    continue;
                }
            },
        };
        let key = (ev.student_id.clone(), ev.timestamp, ev.problem_id.clone());
        match seen.get(&key) {
            Some(&c) if c == ev.correct => {
                deduplicated += 1;
                continue;
            }
            Some(_) => {
                return Err(IngestError::DuplicateEvent {
                    line,
                    student_id: key.0,
                    timestamp: key.1,
                    problem_id: key.2,
                })
            }
            None => {
                seen.insert(key, ev.correct);
            }
        }
        events.push(ev);
    }
    let provenance = Provenance {
        source: opts.source.clone(),
        format: format.as_str().to_string(),
        rows_in,
        kept: events.len(),
        dropped_malformed: dropped,
        deduplicated,
    };
    Ok(EventLog::from_unsorted(
        events,
        BTreeMap::new(),
        BTreeMap::new(),
        provenance,
    ))
}

fn parse_u32(row: &Row, k: &str) -> Result<u32, String> {
    let v = row.get(k).ok_or_else(|| format!("missing `{k}`"))?;
    v.trim()
        .parse::<u32>()
        .map_err(|_| format!("{k} `{v}` is not a count"))
}

fn parse_f64(row: &Row, k: &str) -> Result<Option<f64>, String> {
    match row.get(k) {
        None => Ok(None),
        Some(v) => {
            let x = v
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("{k} `{v}` is not a number"))?;
            if !x.is_finite() {
                return Err(format!("{k} is not finite"));
            }
            Ok(Some(x))
        }
    }
}

/// Reads a tutoring-session table keyed by `session_id`.
pub fn ingest_sessions<R: Read>(
    source: R,
    format: Format,
) -> Result<BTreeMap<String, SessionMeta>, IngestError> {
    let mut out = BTreeMap::new();
    for (line, row) in read_rows(format, source)? {
        let parse = || -> Result<SessionMeta, String> {
            if let Some(r) = row.get(MALFORMED_KEY) {
                return Err(r.clone());
            }
            let duration = parse_f64(&row, "duration_minutes")?.ok_or("missing `duration_minutes`")?;
            let share = parse_f64(&row, "student_word_share")?.ok_or("missing `student_word_share`")?;
            if duration < 0.0 {
                return Err("duration_minutes is negative".into());
            }
            Ok(SessionMeta {
                session_id: row.get("session_id").ok_or("missing `session_id`")?.clone(),
                messages_total: parse_u32(&row, "messages_total")?,
                tutor_messages: parse_u32(&row, "tutor_messages")?,
                student_messages: parse_u32(&row, "student_messages")?,
                duration_minutes: duration,
                student_word_share: share,
                prior_session_count: parse_u32(&row, "prior_session_count")?,
            })
        };
        let meta = parse().map_err(|reason| IngestError::MalformedRecord { line, reason })?;
        out.insert(meta.session_id.clone(), meta);
    }
    Ok(out)
}

/// Reads the optional student-context table keyed by `student_id`.
pub fn ingest_context<R: Read>(
    source: R,
    format: Format,
) -> Result<BTreeMap<String, StudentContext>, IngestError> {
    let mut out = BTreeMap::new();
    for (line, row) in read_rows(format, source)? {
        let parse = || -> Result<StudentContext, String> {
            if let Some(r) = row.get(MALFORMED_KEY) {
                return Err(r.clone());
            }
            let gender = match row.get("gender") {
                None => None,
                Some(g) => Some(Gender::parse(g).ok_or_else(|| format!("gender `{g}` not in {{A,B,C}}"))?),
            };
            let low_ses_flag = match row.get("low_ses_flag") {
                None => None,
                Some(v) => Some(parse_bool(v).ok_or_else(|| format!("low_ses_flag `{v}` is not a boolean"))?),
            };
            Ok(StudentContext {
                student_id: row.get("student_id").ok_or("missing `student_id`")?.clone(),
                pretest_score: parse_f64(&row, "pretest_score")?,
                gender,
                low_ses_flag,
                school_id: row.get("school_id").cloned(),
            })
        };
        let ctx = parse().map_err(|reason| IngestError::MalformedRecord { line, reason })?;
        out.insert(ctx.student_id.clone(), ctx);
    }
    Ok(out)
}

/// Writes the events of a log in canonical order.
pub fn emit_events<W: Write>(log: &EventLog, format: Format, out: W) -> Result<(), IngestError> {
    match format {
        Format::Jsonl => {
            let mut out = std::io::BufWriter::new(out);
            for ev in log.events() {
                serde_json::to_writer(&mut out, ev).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Format::Csv => {
            let extra_keys: BTreeSet<&str> = log
                .events()
                .iter()
                .flat_map(|e| e.extras.keys().map(|k| k.as_str()))
                .collect();
            let mut w = csv::Writer::from_writer(out);
            let mut header: Vec<&str> = EVENT_COLUMNS.to_vec();
            header.extend(extra_keys.iter().copied());
            w.write_record(&header)?;
            for ev in log.events() {
                let mut rec = vec![
                    ev.student_id.clone(),
                    ev.seq_index.to_string(),
                    ev.timestamp.to_string(),
                    ev.problem_id.clone(),
                    ev.skill_id.clone(),
                    ev.correct.to_string(),
                    ev.tutored.to_string(),
                    ev.session_id.clone().unwrap_or_default(),
                ];
                for k in &extra_keys {
                    rec.push(ev.extras.get(*k).cloned().unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn write_sessions<W: Write>(
    sessions: &BTreeMap<String, SessionMeta>,
    format: Format,
    out: W,
) -> Result<(), IngestError> {
    write_table(sessions.values(), format, out)
}

pub fn write_context<W: Write>(
    context: &BTreeMap<String, StudentContext>,
    format: Format,
    out: W,
) -> Result<(), IngestError> {
    write_table(context.values(), format, out)
}

fn write_table<'a, T: Serialize + 'a, W: Write>(
    rows: impl Iterator<Item = &'a T>,
    format: Format,
    out: W,
) -> Result<(), IngestError> {
    match format {
        Format::Jsonl => {
            let mut out = std::io::BufWriter::new(out);
            for r in rows {
                serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "student_id,timestamp,problem_id,skill_id,correct,tutored,session_id\n";

    #[test]
    fn shuffled_timestamps_get_sorted_seq_index() {
        let csv = format!("{HEADER}s1,300,p3,k1,1,0,\ns1,100,p1,k1,0,0,\ns1,200,p2,k2,TRUE,false,\n");
        let log = ingest_events(csv.as_bytes(), Format::Csv).unwrap();
        let evs = log.student("s1").unwrap();
        let ts: Vec<i64> = evs.iter().map(|e| e.timestamp).collect();
        let seq: Vec<usize> = evs.iter().map(|e| e.seq_index).collect();
        assert_eq!(ts, vec![100, 200, 300]);
        assert_eq!(seq, vec![0, 1, 2]);
        assert!(evs[1].correct);
    }

    #[test]
    fn bad_boolean_is_malformed_at_its_line() {
        let csv = format!("{HEADER}s1,100,p1,k1,1,0,\ns1,200,p2,k1,maybe,0,\n");
        match ingest_events(csv.as_bytes(), Format::Csv) {
            Err(IngestError::MalformedRecord { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("maybe"));
            }
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn skip_policy_counts_dropped_rows() {
        let csv = format!("{HEADER}s1,100,p1,k1,1,0,\ns1,200,p2,k1,maybe,0,\ns1,100,p1,k1,true,0,\n");
        let opts = IngestOptions {
            on_malformed: MalformedPolicy::Skip,
            source: "t".into(),
        };
        let log = ingest_events_with(csv.as_bytes(), Format::Csv, &opts).unwrap();
        let p = log.provenance();
        assert_eq!((p.rows_in, p.kept, p.dropped_malformed, p.deduplicated), (3, 1, 1, 1));
        assert_eq!(p.kept + p.dropped_malformed + p.deduplicated, p.rows_in);
    }

    #[test]
    fn conflicting_duplicate_fails() {
        let csv = format!("{HEADER}s1,100,p1,k1,1,0,\ns1,100,p1,k1,0,0,\n");
        assert!(matches!(
            ingest_events(csv.as_bytes(), Format::Csv),
            Err(IngestError::DuplicateEvent { line: 3, .. })
        ));
    }

    #[test]
    fn ties_break_by_problem_then_input_order() {
        let csv = format!("{HEADER}s1,100,pb,k1,1,0,\ns1,100,pa,k1,0,0,\ns1,50,pz,k1,0,0,\n");
        let log = ingest_events(csv.as_bytes(), Format::Csv).unwrap();
        let ids: Vec<&str> = log.events().iter().map(|e| e.problem_id.as_str()).collect();
        assert_eq!(ids, vec!["pz", "pa", "pb"]);
    }

    #[test]
    fn tutored_without_session_is_malformed() {
        let csv = format!("{HEADER}s1,100,p1,k1,1,1,\n");
        assert!(matches!(
            ingest_events(csv.as_bytes(), Format::Csv),
            Err(IngestError::MalformedRecord { line: 2, .. })
        ));
    }

    #[test]
    fn missing_column_is_reported() {
        let csv = "student_id,timestamp,problem_id,correct\ns1,1,p,1\n";
        assert!(matches!(
            ingest_events(csv.as_bytes(), Format::Csv),
            Err(IngestError::MissingColumn(c)) if c == "skill_id"
        ));
    }

    #[test]
    fn jsonl_accepts_native_types_and_keeps_extras() {
        let jl = r#"{"student_id":"s2","timestamp":5,"problem_id":"p","skill_id":"k","correct":true,"tutored":1,"session_id":"x","device":"tablet"}
{"student_id":"s2","timestamp":6,"problem_id":"q","skill_id":"k","correct":"False"}
"#;
        let log = ingest_events(jl.as_bytes(), Format::Jsonl).unwrap();
        let evs = log.student("s2").unwrap();
        assert!(evs[0].tutored && evs[0].correct);
        assert_eq!(evs[0].extras.get("device").map(|s| s.as_str()), Some("tablet"));
        assert!(!evs[1].correct && !evs[1].tutored);
    }

    #[test]
    fn boolean_parsing_is_strict() {
        for ok in ["1", "0", "true", "FALSE", "True"] {
            assert!(parse_bool(ok).is_some(), "{ok}");
        }
        for bad in ["yes", "2", "", "t", "maybe"] {
            assert!(parse_bool(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn session_and_context_tables_parse() {
        let s = "session_id,messages_total,tutor_messages,student_messages,duration_minutes,student_word_share,prior_session_count\nx,14,8,6,4.2,0.25,0\n";
        let sessions = ingest_sessions(s.as_bytes(), Format::Csv).unwrap();
        assert_eq!(sessions["x"].messages_total, 14);
        let c = "student_id,pretest_score,gender,low_ses_flag,school_id\ns1,212.5,B,1,sch1\ns2,,,,\n";
        let ctx = ingest_context(c.as_bytes(), Format::Csv).unwrap();
        assert_eq!(ctx["s1"].gender, Some(Gender::B));
        assert_eq!(ctx["s2"].pretest_score, None);
        assert_eq!(ctx["s2"].low_ses_flag, None);
    }
}
