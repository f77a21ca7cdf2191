//! JSONL event log ingestion.
//!
//! The supervised agent writes one JSON object per line with the fields
//! `ts`, `kind`, `status` and `payload`. Timestamps may arrive naive; they are
//! read as UTC and the event remembers that it was normalized so the write
//! path can reproduce the original shape.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::timefmt;

pub const DEFAULT_LOG_PATH: &str = "logs/events.jsonl";
pub const DEFAULT_WINDOW_HOURS: f64 = 24.0;
pub const DEFAULT_MAX_EVENTS: usize = 500;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("missing field: {0}")]
    MissingField(&'static str),
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unparseable timestamp: {0:?}")]
    Timestamp(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Outcome status reported by the supervised agent.
///
/// Values outside the known set are kept verbatim in [`Status::Other`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Status {
    Success,
    Ok,
    Delay,
    Fail,
    Info,
    Error,
    Other(String),
}

impl Status {
    pub const KNOWN: [Status; 6] = [
        Status::Success,
        Status::Ok,
        Status::Delay,
        Status::Fail,
        Status::Info,
        Status::Error,
    ];

    pub fn parse(raw: &str) -> Status {
        match raw {
            "success" => Status::Success,
            "ok" => Status::Ok,
            "delay" => Status::Delay,
            "fail" => Status::Fail,
            "info" => Status::Info,
            "error" => Status::Error,
            other => Status::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Status::Success => "success",
            Status::Ok => "ok",
            Status::Delay => "delay",
            Status::Fail => "fail",
            Status::Info => "info",
            Status::Error => "error",
            Status::Other(s) => s,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One behavioral record from the supervised agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub ts: DateTime<Utc>,
    pub kind: String,
    pub status: Status,
    pub payload: Map<String, Value>,
    pub ts_was_naive: bool,
}

impl Event {
    pub fn new(ts: DateTime<Utc>, kind: impl Into<String>, status: Status) -> Self {
        Event {
            ts,
            kind: kind.into(),
            status,
            payload: Map::new(),
            ts_was_naive: false,
        }
    }

    pub fn with_payload(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    /// `delayed_by_sec` from the payload when present and numeric.
    pub fn delayed_by_sec(&self) -> Option<f64> {
        self.payload.get("delayed_by_sec").and_then(Value::as_f64)
    }

    /// `kind:status`, the unit of cause grouping downstream.
    pub fn cause(&self) -> String {
        format!("{}:{}", self.kind, self.status)
    }

    /// Single-line JSON rendering. Naive source timestamps are written back naive.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Wire<'a> {
            ts: String,
            kind: &'a str,
            status: &'a str,
            payload: &'a Map<String, Value>,
        }
        let ts = if self.ts_was_naive {
            timefmt::format_naive(self.ts)
        } else {
            timefmt::format_utc(self.ts)
        };
        serde_json::to_string(&Wire {
            ts,
            kind: &self.kind,
            status: self.status.as_str(),
            payload: &self.payload,
        })
        .expect("event serialization is infallible")
    }
}

fn validate_kind(kind: &str) -> Result<(), IngestError> {
    if kind.is_empty() {
        return Err(IngestError::InvalidField {
            field: "kind",
            reason: "empty".into(),
        });
    }
    if kind.chars().any(char::is_whitespace) {
        return Err(IngestError::InvalidField {
            field: "kind",
            reason: format!("contains whitespace: {kind:?}"),
        });
    }
    Ok(())
}

/// Parse one log line into an [`Event`].
pub fn parse_event(line: &str) -> Result<Event, IngestError> {
    let value: Value = serde_json::from_str(line).map_err(|e| IngestError::Malformed {
        offset: e.column().saturating_sub(1),
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(IngestError::Malformed {
            offset: 0,
            message: "expected a JSON object".into(),
        });
    };

    let raw_ts = match obj.remove("ts") {
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(IngestError::InvalidField {
                field: "ts",
                reason: format!("expected string, got {other}"),
            })
        }
        None => return Err(IngestError::MissingField("ts")),
    };
    let kind = match obj.remove("kind") {
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(IngestError::InvalidField {
                field: "kind",
                reason: format!("expected string, got {other}"),
            })
        }
        None => return Err(IngestError::MissingField("kind")),
    };
    validate_kind(&kind)?;

    let parsed = timefmt::parse_ts(&raw_ts).ok_or(IngestError::Timestamp(raw_ts))?;

    let status = match obj.remove("status") {
        Some(Value::String(s)) => Status::parse(&s),
        None | Some(Value::Null) => Status::Info,
        Some(other) => Status::Other(other.to_string()),
    };
    let payload = match obj.remove("payload") {
        Some(Value::Object(map)) => map,
        None | Some(Value::Null) => Map::new(),
        Some(other) => {
            return Err(IngestError::InvalidField {
                field: "payload",
                reason: format!("expected object, got {other}"),
            })
        }
    };

    Ok(Event {
        ts: parsed.instant,
        kind,
        status,
        payload,
        ts_was_naive: parsed.was_naive,
    })
}

/// Events selected by [`load_window`] plus the number of unusable lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Window {
    pub events: Vec<Event>,
    pub skipped: usize,
}

pub(crate) fn hours_to_duration(hours: f64) -> Duration {
    Duration::microseconds((hours * 3_600_000_000.0).round() as i64)
}

/// Read `path` and keep events with `ts` in `[now - window_hours, now]`,
/// ascending, truncated to the most recent `max_events`.
pub fn load_window(
    path: &Path,
    now: DateTime<Utc>,
    window_hours: f64,
    max_events: usize,
) -> Result<Window, IngestError> {
    if !(window_hours.is_finite() && window_hours > 0.0) {
        return Err(IngestError::InvalidWindow(format!(
            "window_hours must be positive, got {window_hours}"
        )));
    }
    if max_events == 0 {
        return Err(IngestError::InvalidWindow("max_events must be positive".into()));
    }
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let start = now - hours_to_duration(window_hours);

    let mut window = Window::default();
    for line in reader.split(b'\n') {
        let line = line.map_err(io_err)?;
        let Ok(text) = std::str::from_utf8(&line) else {
            window.skipped += 1;
            continue;
        };
        if text.trim().is_empty() {
            continue;
        }
        match parse_event(text) {
            Ok(e) if e.ts >= start && e.ts <= now => window.events.push(e),
            Ok(_) => {}
            Err(_) => window.skipped += 1,
        }
    }
    // stable: equal timestamps keep file order
    window.events.sort_by_key(|e| e.ts);
    if window.events.len() > max_events {
        window.events.drain(..window.events.len() - max_events);
    }
    Ok(window)
}

/// Append one event as a single JSON line. The parent directory must exist.
pub fn append_event(path: &Path, event: &Event) -> Result<(), IngestError> {
    let mut line = event.to_json_line();
    line.push('\n');
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    file.write_all(line.as_bytes()).map_err(io_err)?;
    file.flush().map_err(io_err)
}
