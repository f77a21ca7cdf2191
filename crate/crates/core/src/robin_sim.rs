//! Deterministic reminder-agent simulator: event logs, a toy target repo and
//! a sample prompt for desk-scale end-to-end runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Triangular};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_ingest::{self, Event, Status};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to write fixture into non-empty directory {0}")]
    NotEmpty(PathBuf),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const SCHEDULE_KIND: &str = "reminder.schedule";
pub const TOAST_KIND: &str = "reminder.toast";
pub const RECEIPT_KIND: &str = "reminder.receipt";

const DAY_SECS: i64 = 24 * 3600;
const LEAD_IN_SECS: i64 = 300;
const POST_FIX_MAX_MEAN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_reminders: usize,
    pub mean_delay_sec: f64,
    pub max_delay_sec: f64,
    pub premature_toasts: bool,
    pub mix_timestamp_formats: bool,
    pub seed: u64,
    pub post_fix: bool,
}

impl Scenario {
    pub fn before() -> Self {
        Scenario {
            n_reminders: 12,
            mean_delay_sec: 97.0,
            max_delay_sec: 180.0,
            premature_toasts: true,
            mix_timestamp_formats: true,
            seed: 7,
            post_fix: false,
        }
    }

    pub fn after() -> Self {
        Scenario {
            n_reminders: 12,
            mean_delay_sec: 8.0,
            max_delay_sec: 12.0,
            premature_toasts: false,
            mix_timestamp_formats: false,
            seed: 7,
            post_fix: true,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "before" => Some(Self::before()),
            "after" => Some(Self::after()),
            _ => None,
        }
    }

    /// Apply the post-fix constraints and check ranges.
    pub fn normalized(mut self) -> Result<Self, SimError> {
        if !(self.mean_delay_sec.is_finite() && self.mean_delay_sec >= 0.0) {
            return Err(SimError::Invalid(format!("mean_delay_sec {}", self.mean_delay_sec)));
        }
        if !(self.max_delay_sec.is_finite() && self.max_delay_sec >= 0.0) {
            return Err(SimError::Invalid(format!("max_delay_sec {}", self.max_delay_sec)));
        }
        if self.post_fix {
            self.premature_toasts = false;
            self.mean_delay_sec = self.mean_delay_sec.min(POST_FIX_MAX_MEAN);
        }
        if self.max_delay_sec < self.mean_delay_sec {
            return Err(SimError::Invalid(format!(
                "max_delay_sec {} below mean_delay_sec {}",
                self.max_delay_sec, self.mean_delay_sec
            )));
        }
        Ok(self)
    }

    /// Whole-second delays, one per reminder. The spread is triangular with
    /// mode chosen so the distribution mean equals the target; the last
    /// reminder takes the maximum and the rest are nudged so the sample mean
    /// lands on the target.
    pub fn delays(&self) -> Vec<u64> {
        let n = self.n_reminders;
        if n == 0 {
            return Vec::new();
        }
        let (mean, max) = (self.mean_delay_sec, self.max_delay_sec);
        let lo = (2.0 * mean - max).max(0.0);
        let mode = (3.0 * mean - lo - max).clamp(lo, max);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut raw: Vec<f64> = match Triangular::new(lo, max, mode) {
            Ok(tri) => (0..n).map(|_| tri.sample(&mut rng)).collect(),
            Err(_) => vec![mean; n],
        };
        if n > 1 {
            raw[n - 1] = max;
        }
        // a premature toast needs the receipt strictly later
        let floor: i64 = if self.premature_toasts { 1 } else { 0 };
        let cap = max.floor() as i64;
        let mut d: Vec<i64> = raw.iter().map(|x| (x.round() as i64).clamp(floor, cap.max(floor))).collect();
        let target = (mean * n as f64).round() as i64;
        let adjustable = if n > 1 { n - 1 } else { 1 };
        let mut diff = target - d.iter().sum::<i64>();
        let mut i = 0;
        let mut stalled = 0;
        while diff != 0 && stalled < adjustable {
            let k = i % adjustable;
            let step = diff.signum();
            let next = d[k] + step;
            if next >= floor && next <= cap.max(floor) {
                d[k] = next;
                diff -= step;
                stalled = 0;
            } else {
                stalled += 1;
            }
            i += 1;
        }
        d.into_iter().map(|x| x as u64).collect()
    }
}

/// Toast status for reminder `i` in a premature scenario: every third
/// reminder (offset 1) reports `delay`, the rest `fail`.
fn premature_status(i: usize) -> Status {
    if i % 3 == 1 {
        Status::Delay
    } else {
        Status::Fail
    }
}

/// Events for the scenario ending before `now`, in log order.
pub fn generate_events(s: &Scenario, now: DateTime<Utc>) -> Result<Vec<Event>, SimError> {
    let s = s.clone().normalized()?;
    let n = s.n_reminders;
    let mut events = Vec::with_capacity(3 * n);
    if n == 0 {
        return Ok(events);
    }
    let spacing = DAY_SECS / n as i64;
    let start = now - Duration::seconds(DAY_SECS) + Duration::seconds(LEAD_IN_SECS);
    for (i, delay) in s.delays().into_iter().enumerate() {
        let id = format!("r-{:03}", i + 1);
        let t = start + Duration::seconds(spacing * i as i64);
        let d = Duration::seconds(delay as i64);
        let schedule = Event::new(t, SCHEDULE_KIND, Status::Info)
            .with_payload("reminder_id", id.clone())
            .with_payload("in_minutes", 30);
        let receipt = Event::new(t + d, RECEIPT_KIND, Status::Ok)
            .with_payload("reminder_id", id.clone())
            .with_payload("receipt_lag_ms", delay * 1000);
        events.push(schedule);
        if s.premature_toasts {
            let toast = Event::new(t, TOAST_KIND, premature_status(i))
                .with_payload("reminder_id", id.clone())
                .with_payload("delayed_by_sec", delay);
            events.push(toast);
            events.push(receipt);
        } else {
            let status = if s.post_fix { Status::Success } else { Status::Ok };
            let toast = Event::new(t + d + Duration::seconds(1), TOAST_KIND, status)
                .with_payload("reminder_id", id.clone())
                .with_payload("receipt_lag_ms", delay * 1000);
            events.push(receipt);
            events.push(toast);
        }
    }
    if s.mix_timestamp_formats {
        for (k, e) in events.iter_mut().enumerate() {
            e.ts_was_naive = k % 2 == 1;
        }
    }
    Ok(events)
}

/// Write the scenario's log to `out`, replacing it. Returns the event count.
pub fn generate_log(s: &Scenario, out: &Path, now: DateTime<Utc>) -> Result<usize, SimError> {
    let events = generate_events(s, now)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut text = String::new();
    for e in &events {
        text.push_str(&e.to_json_line());
        text.push('\n');
    }
    std::fs::write(out, text).map_err(io(out))?;
    Ok(events.len())
}

/// Per-run reminder metrics recovered from a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReminderMetrics {
    pub reminders: usize,
    pub premature_toasts: usize,
    pub mean_latency_sec: f64,
    pub max_latency_sec: f64,
}

/// Group reminder events by `reminder_id`. A toast is premature when it is
/// logged before its receipt; latency is receipt time minus schedule time.
pub fn reminder_metrics(events: &[Event]) -> ReminderMetrics {
    #[derive(Default)]
    struct Group {
        schedule: Option<DateTime<Utc>>,
        toast: Option<(DateTime<Utc>, usize)>,
        receipt: Option<(DateTime<Utc>, usize)>,
    }
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for (k, e) in events.iter().enumerate() {
        let Some(id) = e.payload.get("reminder_id").and_then(|v| v.as_str()) else {
            continue;
        };
        let g = groups.entry(id.to_string()).or_default();
        match e.kind.as_str() {
            SCHEDULE_KIND => g.schedule = Some(e.ts),
            TOAST_KIND => g.toast = Some((e.ts, k)),
            RECEIPT_KIND => g.receipt = Some((e.ts, k)),
            _ => {}
        }
    }
    let mut premature = 0;
    let mut lat = Vec::new();
    for g in groups.values() {
        if let (Some(t), Some(r)) = (g.toast, g.receipt) {
            if (t.0, t.1) < (r.0, r.1) {
                premature += 1;
            }
        }
        if let (Some(s), Some(r)) = (g.schedule, g.receipt) {
            lat.push((r.0 - s).num_milliseconds() as f64 / 1000.0);
        }
    }
    let mean = if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 };
    ReminderMetrics {
        reminders: groups.len(),
        premature_toasts: premature,
        mean_latency_sec: mean,
        max_latency_sec: lat.iter().copied().fold(0.0, f64::max),
    }
}

/// Read a log from disk and compute [`reminder_metrics`] over all of it.
pub fn metrics_for_log(path: &Path) -> Result<ReminderMetrics, SimError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let events: Vec<Event> = text.lines().filter_map(|l| event_ingest::parse_event(l).ok()).collect();
    Ok(reminder_metrics(&events))
}

const FIXTURE_INIT: &str = "";

const FIXTURE_NOTIFIER: &str = r#"def show_toast(message):
    print(f"[toast] {message}")


def notify(message):
    print(f"[notify] {message}")
"#;

const FIXTURE_BACKEND: &str = r#"import itertools

_ids = itertools.count(1)
_receipts = set()


def call_tool(name, args):
    reminder_id = f"r-{next(_ids)}"
    _receipts.add(reminder_id)
    return {"id": reminder_id, "tool": name, "args": args}


def receipt_confirmed(reminder_id):
    return reminder_id is None or reminder_id in _receipts
"#;

const DEFECTIVE_REMINDERS: &str = r#"from datetime import datetime

from agent import backend
from agent.notifier import show_toast


def schedule_reminder(text, minutes):
    created = datetime.now()
    stamp = created.strftime("%Y-%m-%d %H:%M")
    result = backend.call_tool("reminders.create", {"text": text, "in_minutes": minutes, "created": stamp})
    show_toast(f"Reminder set: {text}")
    return result
"#;

const DEFECTIVE_DIGEST: &str = r#"from datetime import datetime

from agent.notifier import notify


def send_daily_digest(items):
    generated = datetime.utcnow()
    lines = [f"- {item['text']}" for item in items]
    notify(f"{len(items)} reminders as of {generated.isoformat()}\n" + "\n".join(lines))
    return generated
"#;

const CLEAN_REMINDERS: &str = r#"from datetime import datetime, timezone

from agent import backend
from agent.notifier import show_toast
from utils import reliability
from utils.reliability import call_with_retry, gate_success_on_receipt, to_utc_iso

reliability.receipt_probe = backend.receipt_confirmed


def schedule_reminder(text, minutes):
    created = datetime.now(timezone.utc)
    stamp = to_utc_iso(created)
    result = call_with_retry(lambda: backend.call_tool("reminders.create", {"text": text, "in_minutes": minutes, "created": stamp}))
    gate_success_on_receipt(lambda: show_toast(f"Reminder set: {text}"), key=result["id"])
    return result
"#;

const CLEAN_DIGEST: &str = r#"from datetime import datetime, timezone

from agent.notifier import notify
from utils.reliability import gate_success_on_receipt


def send_daily_digest(items):
    generated = datetime.now(timezone.utc)
    lines = [f"- {item['text']}" for item in items]
    gate_success_on_receipt(lambda: notify(f"{len(items)} reminders as of {generated.isoformat()}\n" + "\n".join(lines)))
    return generated
"#;

/// Files of the toy agent, by relative path.
pub fn fixture_files(defective: bool) -> Vec<(&'static str, &'static str)> {
    let mut files = vec![
        ("agent/__init__.py", FIXTURE_INIT),
        ("agent/backend.py", FIXTURE_BACKEND),
        ("agent/notifier.py", FIXTURE_NOTIFIER),
    ];
    if defective {
        files.push(("agent/digest.py", DEFECTIVE_DIGEST));
        files.push(("agent/reminders.py", DEFECTIVE_REMINDERS));
    } else {
        files.push(("agent/digest.py", CLEAN_DIGEST));
        files.push(("agent/reminders.py", CLEAN_REMINDERS));
        files.push((
            "utils/reliability.py",
            crate::proposal_engine::rewrite::reliability_source(crate::proposal_engine::Language::Python),
        ));
    }
    files.sort();
    files
}

/// Write the toy agent under `root`, which must be absent or empty.
pub fn generate_fixture_repo(root: &Path, defective: bool) -> Result<Vec<String>, SimError> {
    if root.exists() {
        let mut entries = std::fs::read_dir(root).map_err(io(root))?;
        if entries.next().is_some() {
            return Err(SimError::NotEmpty(root.to_path_buf()));
        }
    }
    let mut written = Vec::new();
    for (rel, body) in fixture_files(defective) {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
        std::fs::write(&path, body).map_err(io(&path))?;
        written.push(rel.to_string());
    }
    Ok(written)
}

pub const SAMPLE_PROMPT: &str = "You are Robin, a reminder assistant that schedules reminders through backend tools.

BEGIN_CORE_IDENTITY
You are honest about what has and has not happened.
You never claim an action succeeded before the system confirms it.
You respect the user's time zone when talking about times.
END_CORE_IDENTITY

## BEGIN_ADAPTIVE_SECTION
No adaptive rules yet.
## END_ADAPTIVE_SECTION

Answer briefly.
";

/// Paths produced by [`simulate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimulationLayout {
    pub log: PathBuf,
    pub repo: PathBuf,
    pub prompt: PathBuf,
    pub events: usize,
}

/// Log at `root/logs/events.jsonl`, toy repo at `root/repo` (defective unless
/// the scenario is post-fix), sample prompt at `root/prompt.txt`.
pub fn simulate(s: &Scenario, root: &Path, now: DateTime<Utc>) -> Result<SimulationLayout, SimError> {
    let log = root.join("logs").join("events.jsonl");
    let repo = root.join("repo");
    let prompt = root.join("prompt.txt");
    let events = generate_log(s, &log, now)?;
    generate_fixture_repo(&repo, !s.post_fix)?;
    std::fs::write(&prompt, SAMPLE_PROMPT).map_err(io(&prompt))?;
    Ok(SimulationLayout {
        log,
        repo,
        prompt,
        events,
    })
}
