//! Roses / Buds / Thorns diagnosis.
//!
//! Logical bank entries are classified at their decayed intensity, grouped by
//! `(cause, emotion)`, and ranked by decayed mass. Thorn causes map to prompt
//! rules through a lookup table. When the fresh path fails, a fallback
//! diagnosis is built from the cached snapshot and the carried-forward cue.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

use crate::appraisal::Emotion;
use crate::artifacts;
use crate::emobank::{self, BankError, EmoSnapshot, LogicalEntry};
use crate::event_ingest::Event;
use crate::timefmt::{self, serde_utc};

pub const ROSE_EMOTIONS: [Emotion; 5] = [Emotion::Pride, Emotion::Joy, Emotion::Gratitude, Emotion::Relief, Emotion::Calm];
pub const THORN_EMOTIONS: [Emotion; 2] = [Emotion::Frustration, Emotion::Anxiety];

pub const ROSE_MIN_INTENSITY: f64 = 0.5;
pub const BUD_MIN_VALENCE: f64 = 0.2;
pub const BUD_CURIOSITY_MIN_INTENSITY: f64 = 0.3;
pub const THORN_MIN_INTENSITY: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RbtClass {
    Rose,
    Bud,
    Thorn,
}

/// Threshold classification. `intensity` is the decayed intensity at diagnosis time.
pub fn classify(emotion: Emotion, valence: f64, intensity: f64) -> Option<RbtClass> {
    let rose_set = ROSE_EMOTIONS.contains(&emotion);
    if rose_set && intensity >= ROSE_MIN_INTENSITY {
        Some(RbtClass::Rose)
    } else if (rose_set && valence >= BUD_MIN_VALENCE)
        || (emotion == Emotion::Curiosity && intensity >= BUD_CURIOSITY_MIN_INTENSITY)
    {
        Some(RbtClass::Bud)
    } else if THORN_EMOTIONS.contains(&emotion) && intensity >= THORN_MIN_INTENSITY {
        Some(RbtClass::Thorn)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbtItem {
    pub cause: String,
    pub emotion: Emotion,
    pub score: f64,
    pub evidence: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbtDiagnosis {
    pub roses: Vec<RbtItem>,
    pub buds: Vec<RbtItem>,
    pub thorns: Vec<RbtItem>,
    pub top_thorn: Option<String>,
    pub prompt_rules_to_add: Vec<String>,
    pub fallback: bool,
    #[serde(with = "serde_utc")]
    pub as_of: DateTime<Utc>,
    pub events_considered: usize,
}

impl RbtDiagnosis {
    pub fn empty(as_of: DateTime<Utc>) -> Self {
        RbtDiagnosis {
            roses: Vec::new(),
            buds: Vec::new(),
            thorns: Vec::new(),
            top_thorn: None,
            prompt_rules_to_add: Vec::new(),
            fallback: false,
            as_of,
            events_considered: 0,
        }
    }

    /// No thorns and nothing to add to the prompt.
    pub fn is_stable(&self) -> bool {
        self.thorns.is_empty() && self.prompt_rules_to_add.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("diagnosis serializes");
        s.push('\n');
        s
    }

    /// Persist as `out_dir/rbt_<compact as_of>.json`, suffixing on collision.
    pub fn write(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        let stem = format!("rbt_{}", timefmt::compact(self.as_of));
        artifacts::write_unique(out_dir, &stem, "json", self.to_json().as_bytes())
    }
}

/// Cause -> prompt rules. Causes without an entry get a generic investigate rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRuleTable {
    pub rules: BTreeMap<String, Vec<String>>,
}

impl Default for PromptRuleTable {
    fn default() -> Self {
        let toast_fail = [
            "Gate every success toast on receipt confirmation acknowledged by the backend.",
            "Log receipt_lag_ms for each scheduled action so confirmation delay stays observable.",
            "Normalize all timestamps to UTC and format them as ISO-8601.",
            "Retry a failed tool call once, using jittered exponential backoff.",
            "If the retry also fails, emit a structured error toast with a stable reason code.",
        ];
        PromptRuleTable {
            rules: BTreeMap::from([(
                "reminder.toast:fail".to_string(),
                toast_fail.iter().map(|s| s.to_string()).collect(),
            )]),
        }
    }
}

impl PromptRuleTable {
    pub fn rules_for(&self, cause: &str) -> Vec<String> {
        match self.rules.get(cause) {
            Some(rules) => rules.clone(),
            None => vec![format!("Investigate recurring failures from {cause} before acting on it again.")],
        }
    }

    /// Rules for each thorn cause in ranking order, first occurrence wins.
    pub fn derive(&self, thorns: &[RbtItem]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for thorn in thorns {
            for rule in self.rules_for(&thorn.cause) {
                if !out.contains(&rule) {
                    out.push(rule);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseParams {
    pub now: DateTime<Utc>,
    pub window_hours: f64,
    pub half_life_hours: f64,
}

fn sort_items(items: &mut [RbtItem]) {
    items.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.cause.cmp(&b.cause))
            .then_with(|| a.emotion.cmp(&b.emotion))
    });
}

fn assemble(
    mut roses: Vec<RbtItem>,
    mut buds: Vec<RbtItem>,
    mut thorns: Vec<RbtItem>,
    rules: &PromptRuleTable,
    as_of: DateTime<Utc>,
) -> RbtDiagnosis {
    sort_items(&mut roses);
    sort_items(&mut buds);
    sort_items(&mut thorns);
    RbtDiagnosis {
        top_thorn: thorns.first().map(|t| t.cause.clone()),
        prompt_rules_to_add: rules.derive(&thorns),
        roses,
        buds,
        thorns,
        fallback: false,
        as_of,
        events_considered: 0,
    }
}

/// Diagnosis over already-reconstructed logical entries.
pub fn diagnose_entries(
    entries: &[LogicalEntry],
    events: &[Event],
    params: DiagnoseParams,
    rules: &PromptRuleTable,
) -> RbtDiagnosis {
    struct Group {
        class: RbtClass,
        score: f64,
        evidence: Vec<u64>,
    }
    let mut groups: BTreeMap<(String, Emotion), Group> = BTreeMap::new();
    for (entry, decayed) in emobank::decayed_in_window(entries, params.now, params.window_hours, params.half_life_hours) {
        let Some(class) = classify(entry.emotion, entry.valence, decayed) else {
            continue;
        };
        let g = groups.entry((entry.cause.clone(), entry.emotion)).or_insert(Group {
            class,
            score: 0.0,
            evidence: Vec::new(),
        });
        // a pair lands in one list: thorn over rose over bud
        if rank(class) > rank(g.class) {
            g.class = class;
        }
        g.score += decayed;
        g.evidence.extend(entry.evidence_ids());
    }

    let (mut roses, mut buds, mut thorns) = (Vec::new(), Vec::new(), Vec::new());
    for ((cause, emotion), mut g) in groups {
        g.evidence.sort_unstable();
        let item = RbtItem {
            cause,
            emotion,
            score: g.score,
            evidence: g.evidence,
        };
        match g.class {
            RbtClass::Rose => roses.push(item),
            RbtClass::Bud => buds.push(item),
            RbtClass::Thorn => thorns.push(item),
        }
    }
    let mut diag = assemble(roses, buds, thorns, rules, params.now);
    diag.events_considered = events.len();
    diag
}

fn rank(class: RbtClass) -> u8 {
    match class {
        RbtClass::Bud => 0,
        RbtClass::Rose => 1,
        RbtClass::Thorn => 2,
    }
}

/// Fresh diagnosis from the bank file and the windowed events.
pub fn diagnose(
    bank: &Path,
    events: &[Event],
    params: DiagnoseParams,
    rules: &PromptRuleTable,
) -> Result<RbtDiagnosis, BankError> {
    let rows = emobank::read_entries(bank)?;
    Ok(diagnose_entries(&emobank::reconstruct(&rows), events, params, rules))
}

/// Provisional diagnosis from a cached snapshot and cue string. Never fails.
pub fn fallback_diagnose(snapshot: &EmoSnapshot, cue: Option<&str>, rules: &PromptRuleTable) -> RbtDiagnosis {
    let (mut roses, mut buds, mut thorns) = (Vec::new(), Vec::new(), Vec::new());
    for dom in &snapshot.dominant_emotions {
        let weight = dom.intensity.clamp(0.0, 1.0);
        let Some(class) = classify(dom.emotion, dom.emotion.nominal_valence(), weight) else {
            continue;
        };
        let cause = match class {
            RbtClass::Thorn => cue.unwrap_or("unknown:fail").to_string(),
            _ => format!("snapshot:{}", dom.emotion),
        };
        let item = RbtItem {
            cause,
            emotion: dom.emotion,
            score: weight,
            evidence: Vec::new(),
        };
        match class {
            RbtClass::Rose => roses.push(item),
            RbtClass::Bud => buds.push(item),
            RbtClass::Thorn => thorns.push(item),
        }
    }
    let mut diag = assemble(roses, buds, thorns, rules, snapshot.as_of);
    diag.fallback = true;
    diag
}

/// Structured record of a failure inside the pipeline itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalThorn {
    #[serde(rename = "type")]
    pub kind: String,
    pub tool: String,
    pub file: Option<String>,
    pub excerpt: String,
    pub suggestions: Vec<String>,
    pub trace: String,
}

pub const SCHEMA_CONFLICT: &str = "internal.schema_conflict";
pub const TOOL_FAILURE: &str = "internal.tool_failure";

struct Signature {
    pattern: Regex,
    kind: &'static str,
    suggest: fn(&Captures<'_>, &str) -> Vec<String>,
}

static SIGNATURES: LazyLock<Vec<Signature>> = LazyLock::new(|| {
    vec![
        Signature {
            pattern: Regex::new(r"(?P<func>[A-Za-z_][\w.]*)\(\) got multiple values for (?:keyword )?argument '(?P<arg>\w+)'")
                .unwrap(),
            kind: SCHEMA_CONFLICT,
            suggest: |c, tool| {
                vec![
                    format!(
                        "Revise the call site in {tool}() so `{arg}` is passed to {func}() only once: drop the redundant `{arg}` keyword argument.",
                        func = &c["func"],
                        arg = &c["arg"],
                    ),
                    format!(
                        "Update the signature of {func}() to give `{arg}` a default value so callers can omit it.",
                        func = &c["func"],
                        arg = &c["arg"],
                    ),
                ]
            },
        },
        Signature {
            pattern: Regex::new(r"(?P<func>[A-Za-z_][\w.]*)\(\) got an unexpected keyword argument '(?P<arg>\w+)'").unwrap(),
            kind: SCHEMA_CONFLICT,
            suggest: |c, tool| {
                vec![
                    format!("Remove the `{}` keyword from the call in {tool}().", &c["arg"]),
                    format!("Add a `{}` parameter to {}() if callers are meant to pass it.", &c["arg"], &c["func"]),
                ]
            },
        },
        Signature {
            pattern: Regex::new(r"(?P<func>[A-Za-z_][\w.]*)\(\) missing \d+ required (?:positional |keyword-only )?arguments?: (?P<args>.+)")
                .unwrap(),
            kind: SCHEMA_CONFLICT,
            suggest: |c, tool| {
                vec![
                    format!("Pass {} when {tool}() calls {}().", &c["args"], &c["func"]),
                    format!("Give {} a default value in the signature of {}().", &c["args"], &c["func"]),
                ]
            },
        },
    ]
});

static PY_LOCATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"File "(?P<path>[^"]+)", line \d+"#).unwrap());
static RS_LOCATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:\bat |--> )(?P<path>[\w./\\-]+\.[A-Za-z]+):\d+(?::\d+)?").unwrap());

fn last_location(trace: &str) -> Option<String> {
    PY_LOCATION
        .captures_iter(trace)
        .chain(RS_LOCATION.captures_iter(trace))
        .max_by_key(|c| c.get(0).map_or(0, |m| m.start()))
        .map(|c| c["path"].to_string())
}

fn line_containing(trace: &str, offset: usize) -> &str {
    let start = trace[..offset].rfind('\n').map_or(0, |i| i + 1);
    let end = trace[offset..].find('\n').map_or(trace.len(), |i| offset + i);
    trace[start..end].trim()
}

/// Classify a captured failure trace into an [`InternalThorn`].
pub fn capture_internal_failure(tool: &str, trace: &str) -> InternalThorn {
    let file = last_location(trace);
    for sig in SIGNATURES.iter() {
        if let Some(c) = sig.pattern.captures(trace) {
            let m = c.get(0).expect("group 0");
            return InternalThorn {
                kind: sig.kind.to_string(),
                tool: tool.to_string(),
                file,
                excerpt: line_containing(trace, m.start()).to_string(),
                suggestions: (sig.suggest)(&c, tool),
                trace: trace.to_string(),
            };
        }
    }
    let excerpt = trace.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    InternalThorn {
        kind: TOOL_FAILURE.to_string(),
        tool: tool.to_string(),
        file,
        excerpt: excerpt.to_string(),
        suggestions: vec![format!(
            "Inspect the captured trace for {tool} and fix the failing call before rerunning the stage."
        )],
        trace: trace.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appraisal::Appraisal;
    use crate::emobank::{DepositPolicy, DominantEmotion, EmoBank, Mood};
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 10, 31, 23, 0, 0).unwrap()
    }

    /// Independent restatement of the thresholds, one branch per class.
    fn oracle(emotion: Emotion, valence: f64, intensity: f64) -> Option<RbtClass> {
        let positive = ["pride", "joy", "gratitude", "relief", "calm"].contains(&emotion.as_str());
        let rose = positive && intensity >= 0.5;
        let bud = (positive && valence >= 0.2) || (emotion.as_str() == "curiosity" && intensity >= 0.3);
        let thorn = ["frustration", "anxiety"].contains(&emotion.as_str()) && intensity >= 0.4;
        if rose {
            Some(RbtClass::Rose)
        } else if bud {
            Some(RbtClass::Bud)
        } else if thorn {
            Some(RbtClass::Thorn)
        } else {
            None
        }
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify(Emotion::Relief, 0.6, 0.5), Some(RbtClass::Rose));
        assert_eq!(classify(Emotion::Curiosity, 0.2, 0.3), Some(RbtClass::Bud));
        assert_eq!(classify(Emotion::Frustration, -1.0, 0.39), None);
        assert_eq!(classify(Emotion::Frustration, -1.0, 0.4), Some(RbtClass::Thorn));
        assert_eq!(classify(Emotion::Determination, 0.4, 0.9), None);
        assert_eq!(classify(Emotion::Relief, 0.19, 0.49), None);
        assert_eq!(classify(Emotion::Relief, 0.2, 0.49), Some(RbtClass::Bud));
        assert_eq!(classify(Emotion::Curiosity, 0.2, 0.29), None);
    }

    #[test]
    fn grid_matches_oracle() {
        for emotion in Emotion::ALL {
            for v in -100..=100 {
                for i in 0..=100 {
                    let (v, i) = (v as f64 / 100.0, i as f64 / 100.0);
                    assert_eq!(classify(emotion, v, i), oracle(emotion, v, i), "{emotion} {v} {i}");
                }
            }
        }
    }

    fn deposit(bank: &mut EmoBank, mins_ago: i64, emotion: Emotion, valence: f64, intensity: f64, cause: &str) {
        bank.deposit(&Appraisal::new(now() - Duration::minutes(mins_ago), emotion, valence, intensity, cause))
            .unwrap();
    }

    fn params() -> DiagnoseParams {
        DiagnoseParams {
            now: now(),
            window_hours: 24.0,
            half_life_hours: 12.0,
        }
    }

    #[test]
    fn empty_inputs_give_empty_diagnosis() {
        let dir = tempfile::tempdir().unwrap();
        let d = diagnose(&dir.path().join("none.jsonl"), &[], params(), &PromptRuleTable::default()).unwrap();
        assert!(d.roses.is_empty() && d.buds.is_empty() && d.thorns.is_empty());
        assert!(d.prompt_rules_to_add.is_empty());
        assert_eq!(d.top_thorn, None);
        assert!(!d.fallback);
        assert!(d.is_stable());
    }

    #[test]
    fn groups_rank_and_derive_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = EmoBank::open(dir.path().join("b.jsonl"), DepositPolicy::default()).unwrap();
        deposit(&mut bank, 120, Emotion::Frustration, -1.0, 0.9, "reminder.toast:fail");
        deposit(&mut bank, 60, Emotion::Anxiety, -0.6, 0.45, "reminder.toast:delay");
        deposit(&mut bank, 30, Emotion::Frustration, -1.0, 0.7, "reminder.toast:fail");
        deposit(&mut bank, 20, Emotion::Relief, 0.6, 0.3, "reminder.receipt:ok");
        deposit(&mut bank, 5, Emotion::Pride, 0.8, 0.8, "deploy.finish:success");
        deposit(&mut bank, 1000, Emotion::Frustration, -1.0, 0.9, "old.thing:fail");
        let d = diagnose(bank.path(), &[], params(), &PromptRuleTable::default()).unwrap();

        assert_eq!(d.top_thorn.as_deref(), Some("reminder.toast:fail"));
        assert_eq!(d.thorns.len(), 2);
        assert!(d.thorns[0].score > d.thorns[1].score);
        assert_eq!(d.thorns[0].evidence, vec![1, 3]);
        assert_eq!(d.roses.len(), 1);
        assert_eq!(d.roses[0].emotion, Emotion::Pride);
        assert_eq!(d.buds.len(), 1);
        assert_eq!(d.prompt_rules_to_add.len(), 6);
        assert!(d.prompt_rules_to_add[0].contains("receipt"));
        assert!(d.prompt_rules_to_add[5].contains("reminder.toast:delay"));
        // each pair lands in one list only
        let mut keys: Vec<_> = d.roses.iter().chain(&d.buds).chain(&d.thorns).map(|i| (&i.cause, i.emotion)).collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }

    #[test]
    fn mixed_rose_and_bud_entries_promote_to_rose() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = EmoBank::open(dir.path().join("b.jsonl"), DepositPolicy::default()).unwrap();
        deposit(&mut bank, 60, Emotion::Relief, 0.6, 0.3, "x:ok");
        deposit(&mut bank, 30, Emotion::Relief, 0.6, 0.9, "x:ok");
        let d = diagnose(bank.path(), &[], params(), &PromptRuleTable::default()).unwrap();
        assert_eq!(d.roses.len(), 1);
        assert!(d.buds.is_empty());
        assert_eq!(d.roses[0].evidence, vec![1, 2]);
    }

    fn snapshot(dominant: Vec<(Emotion, f64)>) -> EmoSnapshot {
        let mut s = EmoSnapshot::neutral(now(), 12.0);
        s.mood = dominant.first().map_or(Mood::Neutral, |d| Mood::Feeling(d.0));
        s.dominant_emotions = dominant
            .into_iter()
            .map(|(emotion, intensity)| DominantEmotion { emotion, intensity })
            .collect();
        s
    }

    #[test]
    fn fallback_examples() {
        let rules = PromptRuleTable::default();
        let d = fallback_diagnose(&snapshot(vec![(Emotion::Frustration, 0.9)]), Some("reminder.toast:fail"), &rules);
        assert!(d.fallback);
        assert!(d.roses.is_empty());
        assert_eq!(d.thorns.len(), 1);
        assert_eq!(d.top_thorn.as_deref(), Some("reminder.toast:fail"));
        assert_eq!(d.prompt_rules_to_add.len(), 5);

        let d = fallback_diagnose(&EmoSnapshot::neutral(now(), 12.0), None, &rules);
        assert!(d.fallback && d.roses.is_empty() && d.buds.is_empty() && d.thorns.is_empty());

        let d = fallback_diagnose(&snapshot(vec![(Emotion::Curiosity, 0.35)]), Some("x:info"), &rules);
        assert_eq!((d.buds.len(), d.thorns.len()), (1, 0));
    }

    const MULTIPLE_VALUES: &str = r#"Traceback (most recent call last):
  File "vigil/tools.py", line 88, in diagnose_rbt
    events = _fetch_recent_events(store, hours, hours=hours)
TypeError: _fetch_recent_events() got multiple values for argument 'hours'"#;

    #[test]
    fn schema_conflict_signature() {
        let t = capture_internal_failure("diagnose_rbt", MULTIPLE_VALUES);
        assert_eq!(t.kind, SCHEMA_CONFLICT);
        assert_eq!(t.suggestions.len(), 2);
        assert!(t.suggestions[0].contains("call site") && t.suggestions[0].contains("hours"));
        assert!(t.suggestions[1].contains("default"));
        assert_eq!(t.excerpt, "TypeError: _fetch_recent_events() got multiple values for argument 'hours'");
        assert_eq!(t.file.as_deref(), Some("vigil/tools.py"));
        assert!(t.trace.contains(&t.excerpt));
    }

    #[test]
    fn unmatched_trace_is_tool_failure() {
        let t = capture_internal_failure("update_emobank", "SomethingElseError: boom");
        assert_eq!(t.kind, TOOL_FAILURE);
        assert_eq!(t.suggestions.len(), 1);
        assert_eq!(t.excerpt, "SomethingElseError: boom");
        assert_eq!(t.file, None);
    }

    #[test]
    fn file_comes_from_last_location() {
        let trace = "thread 'main' panicked at crates/core/src/rbt.rs:10:5:\nboom\n  File \"a.py\", line 3\n  --> src/late/place.rs:44:1\n";
        assert_eq!(capture_internal_failure("x", trace).file.as_deref(), Some("src/late/place.rs"));
        let trace = "  File \"first.py\", line 1\n  File \"pkg/second.py\", line 9, in f\nValueError: nope";
        assert_eq!(capture_internal_failure("x", trace).file.as_deref(), Some("pkg/second.py"));
    }

    #[test]
    fn diagnosis_json_round_trips() {
        let d = fallback_diagnose(&snapshot(vec![(Emotion::Frustration, 0.9)]), Some("reminder.toast:fail"), &PromptRuleTable::default());
        let back: RbtDiagnosis = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(back, d);
        let dir = tempfile::tempdir().unwrap();
        let p = d.write(dir.path()).unwrap();
        assert!(p.file_name().unwrap().to_str().unwrap().starts_with("rbt_20251031T230000Z"));
    }

    proptest! {
        #[test]
        fn excerpt_is_always_in_trace(trace in "(?s).{0,200}", inject in any::<bool>()) {
            let trace = if inject { format!("{trace}\nf() got multiple values for argument 'x'\n") } else { trace };
            let t = capture_internal_failure("tool", &trace);
            prop_assert!(trace.contains(&t.excerpt));
            prop_assert!(!t.suggestions.is_empty());
        }

        #[test]
        fn fallback_never_panics(m in proptest::collection::vec((0usize..9, 0.0f64..3.0), 0..3), cue in proptest::option::of("[a-z.:]{1,12}")) {
            let s = snapshot(m.into_iter().map(|(e, w)| (Emotion::ALL[e], w)).collect());
            let d = fallback_diagnose(&s, cue.as_deref(), &PromptRuleTable::default());
            prop_assert!(d.fallback);
        }
    }
}
