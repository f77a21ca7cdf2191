//! Deterministic event appraisal.
//!
//! Each event is mapped to an emotion with a signed valence and an intensity
//! through an ordered, first-match rule table. No model calls are involved;
//! the default table can be replaced from a JSON config.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::event_ingest::{Event, Status};
use crate::timefmt::serde_utc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Frustration,
    Anxiety,
    Relief,
    Pride,
    Joy,
    Gratitude,
    Calm,
    Curiosity,
    Determination,
}

impl Emotion {
    pub const ALL: [Emotion; 9] = [
        Emotion::Frustration,
        Emotion::Anxiety,
        Emotion::Relief,
        Emotion::Pride,
        Emotion::Joy,
        Emotion::Gratitude,
        Emotion::Calm,
        Emotion::Curiosity,
        Emotion::Determination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Frustration => "frustration",
            Emotion::Anxiety => "anxiety",
            Emotion::Relief => "relief",
            Emotion::Pride => "pride",
            Emotion::Joy => "joy",
            Emotion::Gratitude => "gratitude",
            Emotion::Calm => "calm",
            Emotion::Curiosity => "curiosity",
            Emotion::Determination => "determination",
        }
    }

    /// Valence this emotion carries under the default table. Used where only
    /// an emotion label survives (cached snapshots).
    pub fn nominal_valence(self) -> f64 {
        match self {
            Emotion::Frustration => -1.0,
            Emotion::Anxiety => -0.6,
            Emotion::Relief | Emotion::Pride | Emotion::Joy | Emotion::Gratitude | Emotion::Calm => 0.6,
            Emotion::Curiosity => 0.2,
            Emotion::Determination => 0.4,
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Emotion::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown emotion {s:?}"))
    }
}

/// Structured emotion derived from one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appraisal {
    #[serde(with = "serde_utc")]
    pub ts: DateTime<Utc>,
    pub emotion: Emotion,
    pub valence: f64,
    pub intensity: f64,
    pub cause: String,
    pub episode: String,
}

impl Appraisal {
    /// Build an appraisal; the episode is derived from the cause.
    pub fn new(ts: DateTime<Utc>, emotion: Emotion, valence: f64, intensity: f64, cause: impl Into<String>) -> Self {
        let cause = cause.into();
        Appraisal {
            ts,
            emotion,
            valence,
            intensity,
            episode: episode_id(&cause),
            cause,
        }
    }
}

/// First 12 hex characters of SHA-256 over the cause string.
pub fn episode_id(cause: &str) -> String {
    let digest = Sha256::digest(cause.as_bytes());
    hex::encode(&digest[..6])
}

/// What a rule matches on. Unknown statuses are matched as `info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Status(String),
    /// Exact kind, or a prefix when the pattern ends in `*`.
    Kind(String),
    Any,
}

impl Matcher {
    fn matches(&self, kind: &str, status: &Status) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Status(s) => {
                let effective = match status {
                    Status::Other(_) => "info",
                    known => known.as_str(),
                };
                s == effective
            }
            Matcher::Kind(k) => match k.strip_suffix('*') {
                Some(prefix) => kind.starts_with(prefix),
                None => kind == k,
            },
        }
    }

    fn is_kind_independent(&self) -> bool {
        !matches!(self, Matcher::Kind(_))
    }
}

fn default_cap() -> f64 {
    1.0
}

/// One row of the rule table.
///
/// Intensity is `intensity_base` when the event has no `delayed_by_sec`
/// (or the rule ignores delay), otherwise `max(floor, delay * intensity_per_sec)`;
/// both are clamped to `[0, cap]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppraisalRule {
    pub matcher: Matcher,
    pub emotion: Emotion,
    pub valence: f64,
    pub intensity_base: f64,
    #[serde(default)]
    pub intensity_per_sec: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    #[serde(default)]
    pub floor: f64,
}

impl AppraisalRule {
    pub fn intensity(&self, delayed_by_sec: Option<f64>) -> f64 {
        let raw = match delayed_by_sec {
            Some(d) if self.intensity_per_sec > 0.0 => (d.max(0.0) * self.intensity_per_sec).max(self.floor),
            _ => self.intensity_base,
        };
        raw.clamp(0.0, self.cap)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleTableError {
    #[error("rule {index}: {reason}")]
    InvalidRule { index: usize, reason: String },
    #[error("no rule matches status {0:?}")]
    NotTotal(String),
}

/// Ordered first-match appraisal rules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppraisalRuleTable {
    rules: Vec<AppraisalRule>,
}

/// Slope of the default delay-to-intensity mapping: 180 s maps to 0.9.
pub const DELAY_INTENSITY_PER_SEC: f64 = 1.0 / 200.0;

impl Default for AppraisalRuleTable {
    fn default() -> Self {
        let rule = |matcher, emotion, valence, base, per_sec, floor| AppraisalRule {
            matcher,
            emotion,
            valence,
            intensity_base: base,
            intensity_per_sec: per_sec,
            cap: 1.0,
            floor,
        };
        let status = |s: &str| Matcher::Status(s.to_string());
        AppraisalRuleTable {
            rules: vec![
                rule(status("fail"), Emotion::Frustration, -1.0, 0.5, DELAY_INTENSITY_PER_SEC, 0.0),
                rule(status("delay"), Emotion::Anxiety, -0.6, 0.2, DELAY_INTENSITY_PER_SEC, 0.2),
                rule(status("success"), Emotion::Relief, 0.6, 0.3, 0.0, 0.0),
                rule(status("ok"), Emotion::Relief, 0.6, 0.3, 0.0, 0.0),
                rule(status("error"), Emotion::Frustration, -1.0, 0.7, 0.0, 0.0),
                rule(status("info"), Emotion::Curiosity, 0.2, 0.3, 0.0, 0.0),
                rule(Matcher::Any, Emotion::Curiosity, 0.2, 0.3, 0.0, 0.0),
            ],
        }
    }
}

impl AppraisalRuleTable {
    /// Validate and wrap a rule list. Every known status must be covered by a
    /// kind-independent rule so appraisal stays total.
    pub fn from_rules(rules: Vec<AppraisalRule>) -> Result<Self, RuleTableError> {
        for (index, r) in rules.iter().enumerate() {
            let bad = |reason: String| RuleTableError::InvalidRule { index, reason };
            if !(-1.0..=1.0).contains(&r.valence) {
                return Err(bad(format!("valence {} outside [-1, 1]", r.valence)));
            }
            for (name, v) in [("intensity_base", r.intensity_base), ("cap", r.cap), ("floor", r.floor)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("{name} {v} outside [0, 1]")));
                }
            }
            if !(r.intensity_per_sec.is_finite() && r.intensity_per_sec >= 0.0) {
                return Err(bad(format!("intensity_per_sec {} must be >= 0", r.intensity_per_sec)));
            }
        }
        for status in Status::KNOWN.iter().chain(std::iter::once(&Status::Other("?".into()))) {
            let covered = rules
                .iter()
                .any(|r| r.matcher.is_kind_independent() && r.matcher.matches("", status));
            if !covered {
                return Err(RuleTableError::NotTotal(status.to_string()));
            }
        }
        Ok(AppraisalRuleTable { rules })
    }

    pub fn rules(&self) -> &[AppraisalRule] {
        &self.rules
    }

    pub fn first_match(&self, kind: &str, status: &Status) -> Option<&AppraisalRule> {
        self.rules.iter().find(|r| r.matcher.matches(kind, status))
    }
}

/// Appraise one event. Returns `None` when the resulting intensity is zero.
pub fn appraise_event(event: &Event, table: &AppraisalRuleTable) -> Option<Appraisal> {
    let rule = table.first_match(&event.kind, &event.status)?;
    let intensity = rule.intensity(event.delayed_by_sec());
    if intensity == 0.0 {
        return None;
    }
    Some(Appraisal::new(event.ts, rule.emotion, rule.valence, intensity, event.cause()))
}
