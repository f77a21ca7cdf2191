//! Timestamp parsing and formatting shared by the log, bank and artifact writers.

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};

/// A parsed timestamp plus whether the source carried a zone designator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedTs {
    pub instant: DateTime<Utc>,
    pub was_naive: bool,
}

const NAIVE_FORMATS: &[&str] = &["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"];

/// Parse an ISO-8601 timestamp. Zone-qualified inputs are converted to UTC;
/// naive inputs are read as UTC and flagged.
pub fn parse_ts(raw: &str) -> Option<ParsedTs> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(ParsedTs {
            instant: dt.with_timezone(&Utc),
            was_naive: false,
        });
    }
    NAIVE_FORMATS.iter().find_map(|fmt| {
        NaiveDateTime::parse_from_str(raw, fmt)
            .ok()
            .map(|naive| ParsedTs {
                instant: naive.and_utc(),
                was_naive: true,
            })
    })
}

/// RFC 3339 with a `Z` suffix and only as much sub-second precision as needed.
pub fn format_utc(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Zone-less rendering, used to write back timestamps that arrived naive.
pub fn format_naive(ts: DateTime<Utc>) -> String {
    ts.naive_utc().format("%Y-%m-%dT%H:%M:%S%.f").to_string()
}

/// Compact form used in artifact names and run ids: `YYYYMMDDTHHMMSSZ`.
pub fn compact(ts: DateTime<Utc>) -> String {
    ts.format("%Y%m%dT%H%M%SZ").to_string()
}

/// Serde adapter for `DateTime<Utc>` fields written as `...Z` strings.
pub mod serde_utc {
    use chrono::{DateTime, Utc};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_utc(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_ts(&raw)
            .map(|p| p.instant)
            .ok_or_else(|| D::Error::custom(format!("invalid timestamp: {raw}")))
    }
}

/// Elapsed hours between two instants (negative when `later` precedes `earlier`).
pub fn hours_between(earlier: DateTime<Utc>, later: DateTime<Utc>) -> f64 {
    (later - earlier).num_microseconds().map_or_else(
        || (later - earlier).num_seconds() as f64 / 3600.0,
        |us| us as f64 / 3_600_000_000.0,
    )
}
