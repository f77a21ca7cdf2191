//! Append-only affective memory.
//!
//! Rows are never rewritten. Decay is computed at read time, and coalescing
//! appends an amplification row pointing back at the logical entry it boosts;
//! readers fold those rows into the entry they reference.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::appraisal::{episode_id, Appraisal, Emotion};
use crate::event_ingest::hours_to_duration;
use crate::timefmt::{self, serde_utc};

pub const DEFAULT_BANK_PATH: &str = "logs/emobank.jsonl";
pub const DEFAULT_HALF_LIFE_HOURS: f64 = 12.0;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("clock skew: entry at {entry} is later than now ({now})")]
    ClockSkew { entry: String, now: String },
    #[error("half-life must be positive, got {0}")]
    InvalidHalfLife(f64),
}

/// One physical row of the bank file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    #[serde(with = "serde_utc")]
    pub ts: DateTime<Utc>,
    pub emotion: Emotion,
    pub intensity: f64,
    pub valence: f64,
    pub cause: String,
    pub episode: String,
    pub entry_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coalesced_with: Option<u64>,
    /// Intensity added to the referenced entry; only set on amplification rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boost: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

/// Deposit thresholds and magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepositPolicy {
    pub noise_floor: f64,
    pub coalesce_window_secs: i64,
    pub coalesce_boost: f64,
    pub rebound_window_secs: i64,
    pub rebound_valence: f64,
    pub rebound_strong: f64,
    pub rebound_weak: f64,
    /// Raw intensity of the preceding negative entry at which the strong rebound applies.
    pub rebound_context_threshold: f64,
}

impl Default for DepositPolicy {
    fn default() -> Self {
        DepositPolicy {
            noise_floor: 0.25,
            coalesce_window_secs: 5 * 60,
            coalesce_boost: 0.1,
            rebound_window_secs: 10 * 60,
            rebound_valence: 0.4,
            rebound_strong: 0.4,
            rebound_weak: 0.3,
            rebound_context_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepositOutcome {
    Stored { entry_id: u64 },
    DiscardedNoise,
    Coalesced { prior_id: u64, entry_id: u64 },
    StoredWithRebound { entry_id: u64, rebound_id: u64 },
}

/// A logical entry: a root row plus every amplification row folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicalEntry {
    pub entry_id: u64,
    pub ts: DateTime<Utc>,
    pub emotion: Emotion,
    pub valence: f64,
    pub cause: String,
    pub episode: String,
    pub base_intensity: f64,
    pub boost_total: f64,
    pub amplified_by: Vec<u64>,
    pub synthetic: bool,
}

impl LogicalEntry {
    pub fn effective_intensity(&self) -> f64 {
        (self.base_intensity + self.boost_total).min(1.0)
    }

    pub fn evidence_ids(&self) -> impl Iterator<Item = u64> + '_ {
        std::iter::once(self.entry_id).chain(self.amplified_by.iter().copied())
    }
}

/// `intensity * 0.5^(elapsed / half_life)`.
pub fn decay(intensity: f64, elapsed_hours: f64, half_life_hours: f64) -> f64 {
    intensity * 0.5f64.powf(elapsed_hours / half_life_hours)
}

/// Effective (amplified, capped) intensity of `entry` decayed to `now`.
pub fn decayed_intensity(entry: &LogicalEntry, now: DateTime<Utc>, half_life_hours: f64) -> Result<f64, BankError> {
    if !(half_life_hours.is_finite() && half_life_hours > 0.0) {
        return Err(BankError::InvalidHalfLife(half_life_hours));
    }
    if now < entry.ts {
        return Err(BankError::ClockSkew {
            entry: timefmt::format_utc(entry.ts),
            now: timefmt::format_utc(now),
        });
    }
    let elapsed = timefmt::hours_between(entry.ts, now);
    Ok(decay(entry.effective_intensity(), elapsed, half_life_hours))
}

/// Fold physical rows into logical entries, in root order.
pub fn reconstruct(rows: &[BankEntry]) -> Vec<LogicalEntry> {
    let mut out: Vec<LogicalEntry> = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    for row in rows {
        if let Some(target) = row.coalesced_with {
            if let Some(&slot) = index.get(&target) {
                let entry = &mut out[slot];
                entry.boost_total += row.boost.unwrap_or(0.0);
                entry.amplified_by.push(row.entry_id);
                // chains resolve to the same logical entry
                index.insert(row.entry_id, slot);
                continue;
            }
        }
        index.insert(row.entry_id, out.len());
        out.push(LogicalEntry {
            entry_id: row.entry_id,
            ts: row.ts,
            emotion: row.emotion,
            valence: row.valence,
            cause: row.cause.clone(),
            episode: row.episode.clone(),
            base_intensity: row.intensity,
            boost_total: 0.0,
            amplified_by: Vec::new(),
            synthetic: row.synthetic,
        });
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Raw file contents plus parsed rows. Unparseable lines (e.g. a torn final
/// write) are skipped.
fn read_raw(path: &Path) -> Result<(Vec<u8>, Vec<BankEntry>), BankError> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes).map_err(io_err(path))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((bytes, Vec::new())),
        Err(e) => return Err(io_err(path)(e)),
    }
    let rows = bytes
        .split(|&b| b == b'\n')
        .filter_map(|line| serde_json::from_slice::<BankEntry>(line).ok())
        .collect();
    Ok((bytes, rows))
}

/// Read every well-formed row from a bank file. A missing file is an empty bank.
pub fn read_entries(path: &Path) -> Result<Vec<BankEntry>, BankError> {
    read_raw(path).map(|(_, rows)| rows)
}

/// Aggregate mood label; `neutral` when nothing is in the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mood {
    Neutral,
    Feeling(Emotion),
}

impl fmt::Display for Mood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mood::Neutral => f.write_str("neutral"),
            Mood::Feeling(e) => e.fmt(f),
        }
    }
}

impl Serialize for Mood {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mood {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == "neutral" {
            return Ok(Mood::Neutral);
        }
        raw.parse().map(Mood::Feeling).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominantEmotion {
    pub emotion: Emotion,
    pub intensity: f64,
}

/// Weights for the composite signals. Each signal is `min(1, Σ weight·w(e))`
/// with `w(e) = min(1, decayed mass of e)`; focus is
/// `clamp(focus_base + calm·w(calm) − stress_penalty·stress, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeWeights {
    pub stress: BTreeMap<Emotion, f64>,
    pub energy: BTreeMap<Emotion, f64>,
    pub motivation: BTreeMap<Emotion, f64>,
    pub focus_base: f64,
    pub focus_calm: f64,
    pub focus_stress_penalty: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        use Emotion::*;
        CompositeWeights {
            stress: BTreeMap::from([(Frustration, 0.7), (Anxiety, 0.7)]),
            energy: BTreeMap::from([(Joy, 0.5), (Pride, 0.5), (Curiosity, 0.3), (Determination, 0.4)]),
            motivation: BTreeMap::from([(Determination, 0.6), (Curiosity, 0.4), (Pride, 0.3)]),
            focus_base: 0.5,
            focus_calm: 0.5,
            focus_stress_penalty: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmoSnapshot {
    pub mood: Mood,
    pub dominant_emotions: Vec<DominantEmotion>,
    pub energy: f64,
    pub stress: f64,
    pub motivation: f64,
    pub focus: f64,
    #[serde(with = "serde_utc")]
    pub as_of: DateTime<Utc>,
    pub half_life_hours: f64,
}

impl EmoSnapshot {
    pub fn neutral(as_of: DateTime<Utc>, half_life_hours: f64) -> Self {
        compute_snapshot(&[], as_of, 1.0, half_life_hours, &CompositeWeights::default())
    }
}

fn in_window(entry: &LogicalEntry, now: DateTime<Utc>, window_hours: f64) -> bool {
    entry.ts <= now && entry.ts >= now - hours_to_duration(window_hours)
}

/// Decayed, amplified intensity of each in-window logical entry.
pub fn decayed_in_window<'a>(
    entries: &'a [LogicalEntry],
    now: DateTime<Utc>,
    window_hours: f64,
    half_life_hours: f64,
) -> impl Iterator<Item = (&'a LogicalEntry, f64)> + 'a {
    entries
        .iter()
        .filter(move |e| in_window(e, now, window_hours))
        .map(move |e| {
            let elapsed = timefmt::hours_between(e.ts, now);
            (e, decay(e.effective_intensity(), elapsed, half_life_hours))
        })
}

pub fn compute_snapshot(
    entries: &[LogicalEntry],
    now: DateTime<Utc>,
    window_hours: f64,
    half_life_hours: f64,
    weights: &CompositeWeights,
) -> EmoSnapshot {
    // emotion -> (mass, most recent (ts, id))
    let mut mass: BTreeMap<Emotion, (f64, (DateTime<Utc>, u64))> = BTreeMap::new();
    for (e, d) in decayed_in_window(entries, now, window_hours, half_life_hours) {
        let slot = mass.entry(e.emotion).or_insert((0.0, (e.ts, e.entry_id)));
        slot.0 += d;
        slot.1 = slot.1.max((e.ts, e.entry_id));
    }
    let mut ranked: Vec<_> = mass.iter().filter(|(_, (m, _))| *m > 0.0).collect();
    ranked.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(b.1 .1.cmp(&a.1 .1)));

    let w = |e: Emotion| mass.get(&e).map_or(0.0, |(m, _)| m.min(1.0));
    let weighted = |table: &BTreeMap<Emotion, f64>| table.iter().map(|(e, k)| k * w(*e)).sum::<f64>().clamp(0.0, 1.0);
    let stress = weighted(&weights.stress);
    let focus = (weights.focus_base + weights.focus_calm * w(Emotion::Calm) - weights.focus_stress_penalty * stress)
        .clamp(0.0, 1.0);

    EmoSnapshot {
        mood: ranked.first().map_or(Mood::Neutral, |(e, _)| Mood::Feeling(**e)),
        dominant_emotions: ranked
            .iter()
            .take(3)
            .map(|(e, (m, _))| DominantEmotion {
                emotion: **e,
                intensity: *m,
            })
            .collect(),
        energy: weighted(&weights.energy),
        stress,
        motivation: weighted(&weights.motivation),
        focus,
        as_of: now,
        half_life_hours,
    }
}

/// Cause with the most decayed mass among negative entries, or among all
/// entries when none are negative.
pub fn dominant_cause(
    entries: &[LogicalEntry],
    now: DateTime<Utc>,
    window_hours: f64,
    half_life_hours: f64,
) -> Option<String> {
    let mut neg: BTreeMap<&str, f64> = BTreeMap::new();
    let mut all: BTreeMap<&str, f64> = BTreeMap::new();
    for (e, d) in decayed_in_window(entries, now, window_hours, half_life_hours) {
        *all.entry(&e.cause).or_default() += d;
        if e.valence < 0.0 {
            *neg.entry(&e.cause).or_default() += d;
        }
    }
    let pick = |m: BTreeMap<&str, f64>| {
        m.into_iter()
            .filter(|(_, v)| *v > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| c.to_string())
    };
    pick(neg).or_else(|| pick(all))
}

/// Handle on a bank file that tracks effective intensities as it deposits.
#[derive(Debug)]
pub struct EmoBank {
    path: PathBuf,
    policy: DepositPolicy,
    rows: Vec<BankEntry>,
    next_id: u64,
    torn_tail: bool,
    /// root entry id -> effective intensity, maintained incrementally
    tracked: BTreeMap<u64, f64>,
    root_of: HashMap<u64, u64>,
}

impl EmoBank {
    /// Open (or lazily create) the bank at `path`.
    pub fn open(path: impl Into<PathBuf>, policy: DepositPolicy) -> Result<Self, BankError> {
        let path = path.into();
        let (bytes, rows) = read_raw(&path)?;
        let mut bank = EmoBank {
            next_id: rows.iter().map(|r| r.entry_id + 1).max().unwrap_or(1),
            torn_tail: bytes.last().is_some_and(|&b| b != b'\n'),
            path,
            policy,
            rows: Vec::new(),
            tracked: BTreeMap::new(),
            root_of: HashMap::new(),
        };
        for row in rows {
            bank.track(&row);
            bank.rows.push(row);
        }
        Ok(bank)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn rows(&self) -> &[BankEntry] {
        &self.rows
    }

    pub fn logical_entries(&self) -> Vec<LogicalEntry> {
        reconstruct(&self.rows)
    }

    /// Effective intensity of a logical entry as tracked during deposits.
    pub fn tracked_intensity(&self, root_id: u64) -> Option<f64> {
        self.tracked.get(&root_id).copied()
    }

    pub fn tracked(&self) -> &BTreeMap<u64, f64> {
        &self.tracked
    }

    /// Timestamp of the newest non-synthetic row.
    pub fn latest_ts(&self) -> Option<DateTime<Utc>> {
        self.rows.iter().filter(|r| !r.synthetic).map(|r| r.ts).max()
    }

    pub fn snapshot(&self, now: DateTime<Utc>, window_hours: f64, half_life_hours: f64, weights: &CompositeWeights) -> EmoSnapshot {
        compute_snapshot(&self.logical_entries(), now, window_hours, half_life_hours, weights)
    }

    fn track(&mut self, row: &BankEntry) {
        match row.coalesced_with.and_then(|t| self.root_of.get(&t).copied()) {
            Some(root) => {
                self.root_of.insert(row.entry_id, root);
                if let Some(v) = self.tracked.get_mut(&root) {
                    *v = (*v + row.boost.unwrap_or(0.0)).min(1.0);
                }
            }
            None => {
                self.root_of.insert(row.entry_id, row.entry_id);
                self.tracked.insert(row.entry_id, row.intensity.min(1.0));
            }
        }
    }

    fn last_real<'a>(&'a self, pred: impl Fn(&BankEntry) -> bool + 'a) -> Option<&'a BankEntry> {
        self.rows.iter().rev().filter(|r| !r.synthetic).find(|r| pred(r))
    }

    fn within(&self, earlier: DateTime<Utc>, later: DateTime<Utc>, secs: i64) -> bool {
        let gap = later - earlier;
        gap >= Duration::zero() && gap <= Duration::seconds(secs)
    }

    fn append(&mut self, new_rows: Vec<BankEntry>) -> Result<(), BankError> {
        let mut buf = String::new();
        if self.torn_tail {
            buf.push('\n');
        }
        for row in &new_rows {
            buf.push_str(&serde_json::to_string(row).expect("bank rows serialize"));
            buf.push('\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))?;
        self.torn_tail = false;
        for row in new_rows {
            self.next_id = self.next_id.max(row.entry_id + 1);
            self.track(&row);
            self.rows.push(row);
        }
        Ok(())
    }

    fn row_from(&self, a: &Appraisal, entry_id: u64) -> BankEntry {
        BankEntry {
            ts: a.ts,
            emotion: a.emotion,
            intensity: a.intensity,
            valence: a.valence,
            cause: a.cause.clone(),
            episode: a.episode.clone(),
            entry_id,
            coalesced_with: None,
            boost: None,
            synthetic: false,
        }
    }

    /// Apply the deposit policy: noise floor, coalescing, store, rebound.
    pub fn deposit(&mut self, a: &Appraisal) -> Result<DepositOutcome, BankError> {
        let p = self.policy.clone();

        if a.intensity < p.noise_floor {
            let inverts = self
                .last_real(|r| r.cause == a.cause)
                .is_some_and(|prior| a.valence.signum() != prior.valence.signum());
            if !inverts {
                return Ok(DepositOutcome::DiscardedNoise);
            }
        }

        if let Some(prior) = self.last_real(|r| r.emotion == a.emotion && r.cause == a.cause) {
            if self.within(prior.ts, a.ts, p.coalesce_window_secs) {
                let root = self.root_of.get(&prior.entry_id).copied().unwrap_or(prior.entry_id);
                let mut row = self.row_from(a, self.next_id);
                row.coalesced_with = Some(root);
                row.boost = Some(p.coalesce_boost);
                let entry_id = row.entry_id;
                self.append(vec![row])?;
                return Ok(DepositOutcome::Coalesced { prior_id: root, entry_id });
            }
        }

        let entry_id = self.next_id;
        let mut rows = vec![self.row_from(a, entry_id)];
        let rebound = self.last_real(|_| true).and_then(|prior| {
            let qualifies = a.valence > 0.0 && prior.valence < 0.0 && self.within(prior.ts, a.ts, p.rebound_window_secs);
            qualifies.then(|| {
                if prior.intensity >= p.rebound_context_threshold {
                    p.rebound_strong
                } else {
                    p.rebound_weak
                }
            })
        });
        if let Some(intensity) = rebound {
            rows.push(BankEntry {
                ts: a.ts,
                emotion: Emotion::Determination,
                intensity,
                valence: p.rebound_valence,
                cause: a.cause.clone(),
                episode: episode_id(&a.cause),
                entry_id: entry_id + 1,
                coalesced_with: None,
                boost: None,
                synthetic: true,
            });
        }
        self.append(rows)?;
        Ok(match rebound {
            Some(_) => DepositOutcome::StoredWithRebound {
                entry_id,
                rebound_id: entry_id + 1,
            },
            None => DepositOutcome::Stored { entry_id },
        })
    }
}

/// Snapshot straight from a bank file.
pub fn snapshot(
    path: &Path,
    now: DateTime<Utc>,
    window_hours: f64,
    half_life_hours: f64,
    weights: &CompositeWeights,
) -> Result<EmoSnapshot, BankError> {
    if !(half_life_hours.is_finite() && half_life_hours > 0.0) {
        return Err(BankError::InvalidHalfLife(half_life_hours));
    }
    let rows = read_entries(path)?;
    Ok(compute_snapshot(&reconstruct(&rows), now, window_hours, half_life_hours, weights))
}
