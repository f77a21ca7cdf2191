//! Stage machine, guarded stage runner and persisted run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appraisal::{appraise_event, AppraisalRule, AppraisalRuleTable};
use crate::artifacts;
use crate::emobank::{self, CompositeWeights, DepositPolicy, EmoBank, EmoSnapshot};
use crate::event_ingest::{self, Event};
use crate::prompt_patch::{self, PromptError, TemplateRenderer};
use crate::proposal_engine::scanner::{PatternRuleSpec, DEFAULT_IGNORE_DIRS};
use crate::proposal_engine::{persist_proposal, scan_snapshot, PatternTable, Reasoner, RepoSnapshot, StrategyReasoner};
use crate::rbt::{self, DiagnoseParams, InternalThorn, PromptRuleTable, RbtDiagnosis};
use crate::timefmt::{self, serde_utc};

pub const RUN_STATE_FILE: &str = "run_state.json";
pub const SNAPSHOT_CACHE_FILE: &str = "emo_snapshot.json";
pub const LOCK_FILE: &str = ".vigil.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Start,
    EbUpdated,
    Diagnosed,
    PromptDone,
    DiffDone,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Start, Stage::EbUpdated, Stage::Diagnosed, Stage::PromptDone, Stage::DiffDone];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Start => "start",
            Stage::EbUpdated => "eb_updated",
            Stage::Diagnosed => "diagnosed",
            Stage::PromptDone => "prompt_done",
            Stage::DiffDone => "diff_done",
        }
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::Start => Some(Stage::EbUpdated),
            Stage::EbUpdated => Some(Stage::Diagnosed),
            Stage::Diagnosed => Some(Stage::PromptDone),
            Stage::PromptDone => Some(Stage::DiffDone),
            Stage::DiffDone => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    UpdateEmobank,
    DiagnoseRbt,
    BuildPromptPatch,
    BuildCodeProposal,
}

impl Tool {
    pub const ALL: [Tool; 4] = [Tool::UpdateEmobank, Tool::DiagnoseRbt, Tool::BuildPromptPatch, Tool::BuildCodeProposal];

    pub fn as_str(self) -> &'static str {
        match self {
            Tool::UpdateEmobank => "update_emobank",
            Tool::DiagnoseRbt => "diagnose_rbt",
            Tool::BuildPromptPatch => "build_prompt_patch",
            Tool::BuildCodeProposal => "build_code_proposal",
        }
    }

    /// The stage a tool must be invoked from.
    pub fn requires(self) -> Stage {
        match self {
            Tool::UpdateEmobank => Stage::Start,
            Tool::DiagnoseRbt => Stage::EbUpdated,
            Tool::BuildPromptPatch => Stage::Diagnosed,
            Tool::BuildCodeProposal => Stage::PromptDone,
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tool {
    type Err = String;

    /// Accepts tool names and a few CLI spellings (`diagnose`, `patch-prompt`, ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "update_emobank" => Ok(Tool::UpdateEmobank),
            "diagnose_rbt" | "diagnose" => Ok(Tool::DiagnoseRbt),
            "build_prompt_patch" | "patch_prompt" => Ok(Tool::BuildPromptPatch),
            "build_code_proposal" | "propose_diff" => Ok(Tool::BuildCodeProposal),
            _ => Err(format!("unknown stage tool {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition: requires {requires}, at {at}")]
pub struct IllegalTransition {
    pub tool: Tool,
    pub at: Stage,
    pub requires: Stage,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("run manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl OrchestratorError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Config(_) => 1,
            OrchestratorError::Illegal(_) => 2,
            OrchestratorError::Locked(_) | OrchestratorError::Manifest { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Ok,
    Degraded(InternalThorn),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub tool: Tool,
    pub outcome: OutcomeKind,
    pub stage: Stage,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: Stage,
    #[serde(with = "serde_utc")]
    pub now: DateTime<Utc>,
    pub cue: Option<String>,
    pub fallback_used: bool,
    #[serde(default)]
    pub guard_aborted: bool,
    pub internal_thorns: Vec<InternalThorn>,
    pub artifacts: Vec<String>,
    /// Diagnosis the later stages read.
    pub diagnosis: Option<String>,
    /// Strategy behind the code proposal, `none` when nothing scored.
    pub strategy: Option<String>,
    pub records: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(now: DateTime<Utc>) -> Self {
        RunManifest {
            run_id: timefmt::compact(now),
            stage: Stage::Start,
            now,
            cue: None,
            fallback_used: false,
            guard_aborted: false,
            internal_thorns: Vec::new(),
            artifacts: Vec::new(),
            diagnosis: None,
            strategy: None,
            records: Vec::new(),
        }
    }

    /// Whether `tool` may run now.
    pub fn check(&self, tool: Tool) -> Result<(), IllegalTransition> {
        if self.stage == tool.requires() {
            Ok(())
        } else {
            Err(IllegalTransition {
                tool,
                at: self.stage,
                requires: tool.requires(),
            })
        }
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(|source| OrchestratorError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Manifest {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), OrchestratorError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        artifacts::atomic_write(path, text.as_bytes()).map_err(|source| OrchestratorError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Advance `manifest` by one stage for `tool`, or refuse.
pub fn advance(manifest: &RunManifest, tool: Tool) -> Result<RunManifest, IllegalTransition> {
    manifest.check(tool)?;
    let mut next = manifest.clone();
    next.stage = tool.requires().next().expect("required stage is never terminal");
    Ok(next)
}

/// Rule overrides read from a `--rules` JSON file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesFile {
    pub appraisal: Option<Vec<AppraisalRule>>,
    pub patterns: Option<Vec<PatternRuleSpec>>,
    pub prompt_rules: Option<BTreeMap<String, Vec<String>>>,
    pub deposit_policy: Option<DepositPolicy>,
    pub composite_weights: Option<CompositeWeights>,
}

#[derive(Debug, Clone, Default)]
pub struct Rules {
    pub appraisal: AppraisalRuleTable,
    pub patterns: PatternTable,
    pub prompt_rules: PromptRuleTable,
    pub deposit_policy: DepositPolicy,
    pub composite_weights: CompositeWeights,
}

impl Rules {
    pub fn from_file(file: RulesFile) -> Result<Self, OrchestratorError> {
        let mut rules = Rules::default();
        if let Some(a) = file.appraisal {
            rules.appraisal =
                AppraisalRuleTable::from_rules(a).map_err(|e| OrchestratorError::Config(format!("appraisal rules: {e}")))?;
        }
        if let Some(p) = file.patterns {
            rules.patterns =
                PatternTable::from_specs(&p).map_err(|e| OrchestratorError::Config(format!("pattern rules: {e}")))?;
        }
        if let Some(r) = file.prompt_rules {
            rules.prompt_rules = PromptRuleTable { rules: r };
        }
        if let Some(d) = file.deposit_policy {
            rules.deposit_policy = d;
        }
        if let Some(w) = file.composite_weights {
            rules.composite_weights = w;
        }
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("cannot read rules file {}: {e}", path.display())))?;
        let file: RulesFile = serde_json::from_str(&text)
            .map_err(|e| OrchestratorError::Config(format!("rules file {}: {e}", path.display())))?;
        Rules::from_file(file)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub log: PathBuf,
    pub prompt: PathBuf,
    pub repo: PathBuf,
    pub out: PathBuf,
    pub bank: PathBuf,
    pub now: DateTime<Utc>,
    pub window_hours: f64,
    pub half_life_hours: f64,
    pub max_events: usize,
    /// Testing hook: make this tool fail before it does any work.
    pub fault: Option<Tool>,
    pub rules: Rules,
}

impl RunConfig {
    /// Defaults for everything except the paths and clock. The bank lives
    /// next to the event log.
    pub fn new(log: PathBuf, prompt: PathBuf, repo: PathBuf, out: PathBuf, now: DateTime<Utc>) -> Self {
        let bank = log
            .parent()
            .map(|p| p.join("emobank.jsonl"))
            .unwrap_or_else(|| PathBuf::from(emobank::DEFAULT_BANK_PATH));
        RunConfig {
            log,
            prompt,
            repo,
            out,
            bank,
            now,
            window_hours: event_ingest::DEFAULT_WINDOW_HOURS,
            half_life_hours: emobank::DEFAULT_HALF_LIFE_HOURS,
            max_events: event_ingest::DEFAULT_MAX_EVENTS,
            fault: None,
            rules: Rules::default(),
        }
    }

    fn params(&self) -> DiagnoseParams {
        DiagnoseParams {
            now: self.now,
            window_hours: self.window_hours,
            half_life_hours: self.half_life_hours,
        }
    }

    /// Check the inputs `tools` will read. Nothing is written.
    pub fn validate(&self, tools: &[Tool]) -> Result<(), OrchestratorError> {
        let cfg = |m: String| Err(OrchestratorError::Config(m));
        if !(self.window_hours.is_finite() && self.window_hours > 0.0) {
            return cfg(format!("window hours must be positive, got {}", self.window_hours));
        }
        if !(self.half_life_hours.is_finite() && self.half_life_hours > 0.0) {
            return cfg(format!("half-life must be positive, got {}", self.half_life_hours));
        }
        if self.max_events == 0 {
            return cfg("max events must be positive".into());
        }
        for tool in tools {
            match tool {
                Tool::UpdateEmobank | Tool::DiagnoseRbt if !self.log.is_file() => {
                    return cfg(format!("event log {} does not exist", self.log.display()));
                }
                Tool::BuildPromptPatch if !self.prompt.is_file() => {
                    return cfg(format!("prompt file {} does not exist", self.prompt.display()));
                }
                Tool::BuildCodeProposal if !self.repo.is_dir() => {
                    return cfg(format!("repository root {} is not a directory", self.repo.display()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn run_state_path(&self) -> PathBuf {
        self.out.join(RUN_STATE_FILE)
    }
}

/// Exclusive hold on an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self, OrchestratorError> {
        let path = out.join(LOCK_FILE);
        let io_err = |source| OrchestratorError::Manifest {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(out).map_err(io_err)?;
        match artifacts::write_new(&path, format!("{}\n", std::process::id()).as_bytes()) {
            Ok(()) => Ok(OutputLock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(OrchestratorError::Locked(out.to_path_buf())),
            Err(e) => Err(io_err(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Snapshot cache written by `update_emobank` and read by the diagnosis fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedSnapshot {
    pub cue: Option<String>,
    pub snapshot: EmoSnapshot,
}

/// Synthetic failure trace used by fault injection.
pub fn injected_trace(tool: Tool) -> String {
    match tool {
        Tool::DiagnoseRbt => concat!(
            "Traceback (most recent call last):\n",
            "  File \"vigil/tools/diagnose.py\", line 42, in diagnose_rbt\n",
            "    events = _fetch_recent_events(log_path, window, hours=window)\n",
            "TypeError: _fetch_recent_events() got multiple values for argument 'hours'\n",
        )
        .to_string(),
        other => format!(
            "Traceback (most recent call last):\n  File \"vigil/tools/{other}.py\", line 1, in {other}\nRuntimeError: injected fault in {other}\n"
        ),
    }
}

struct StageFailure {
    trace: String,
    guard: bool,
}

impl StageFailure {
    fn new(tool: Tool, err: impl fmt::Display) -> Self {
        StageFailure {
            trace: format!("{tool}: {err}"),
            guard: false,
        }
    }
}

#[derive(Default)]
struct StageOutput {
    artifacts: Vec<PathBuf>,
    cue: Option<Option<String>>,
    diagnosis: Option<PathBuf>,
    strategy: Option<String>,
    note: Option<String>,
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn load_events(cfg: &RunConfig, tool: Tool) -> Result<Vec<Event>, StageFailure> {
    event_ingest::load_window(&cfg.log, cfg.now, cfg.window_hours, cfg.max_events)
        .map(|w| w.events)
        .map_err(|e| StageFailure::new(tool, e))
}

fn load_diagnosis(manifest: &RunManifest, tool: Tool) -> Result<RbtDiagnosis, StageFailure> {
    let path = manifest
        .diagnosis
        .as_deref()
        .ok_or_else(|| StageFailure::new(tool, "no diagnosis recorded for this run"))?;
    let text = fs::read_to_string(path).map_err(|e| StageFailure::new(tool, format!("{path}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| StageFailure::new(tool, format!("{path}: {e}")))
}

fn update_emobank(cfg: &RunConfig) -> Result<StageOutput, StageFailure> {
    let tool = Tool::UpdateEmobank;
    let fail = |e: &dyn fmt::Display| StageFailure::new(tool, e);
    let events = load_events(cfg, tool)?;
    if let Some(dir) = cfg.bank.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fail(&e))?;
    }
    let mut bank = EmoBank::open(&cfg.bank, cfg.rules.deposit_policy.clone()).map_err(|e| fail(&e))?;
    // events at or before the newest bank row were ingested by an earlier run
    let watermark = bank.latest_ts();
    for e in events.iter().filter(|e| watermark.is_none_or(|w| e.ts > w)) {
        if let Some(a) = appraise_event(e, &cfg.rules.appraisal) {
            bank.deposit(&a).map_err(|e| fail(&e))?;
        }
    }
    let snapshot = bank.snapshot(cfg.now, cfg.window_hours, cfg.half_life_hours, &cfg.rules.composite_weights);
    let cue = emobank::dominant_cause(&bank.logical_entries(), cfg.now, cfg.window_hours, cfg.half_life_hours);
    let cache = CachedSnapshot {
        cue: cue.clone(),
        snapshot,
    };
    let path = cfg.out.join(SNAPSHOT_CACHE_FILE);
    let mut text = serde_json::to_string_pretty(&cache).expect("snapshot serializes");
    text.push('\n');
    artifacts::atomic_write(&path, text.as_bytes()).map_err(|e| fail(&e))?;
    Ok(StageOutput {
        artifacts: vec![cfg.bank.clone(), path],
        cue: Some(cue),
        ..Default::default()
    })
}

fn diagnose_rbt(cfg: &RunConfig) -> Result<StageOutput, StageFailure> {
    let tool = Tool::DiagnoseRbt;
    let events = load_events(cfg, tool)?;
    let diag = rbt::diagnose(&cfg.bank, &events, cfg.params(), &cfg.rules.prompt_rules)
        .map_err(|e| StageFailure::new(tool, e))?;
    let path = diag.write(&cfg.out).map_err(|e| StageFailure::new(tool, e))?;
    Ok(StageOutput {
        artifacts: vec![path.clone()],
        diagnosis: Some(path),
        ..Default::default()
    })
}

fn build_prompt_patch(cfg: &RunConfig, manifest: &RunManifest) -> Result<StageOutput, StageFailure> {
    let tool = Tool::BuildPromptPatch;
    let diag = load_diagnosis(manifest, tool)?;
    match prompt_patch::patch_prompt_file(&cfg.prompt, &cfg.out, &diag, &TemplateRenderer) {
        Ok(path) => Ok(StageOutput {
            artifacts: vec![path],
            ..Default::default()
        }),
        Err(e) => Err(StageFailure {
            guard: matches!(e, PromptError::Guard { .. }),
            ..StageFailure::new(tool, e)
        }),
    }
}

fn build_code_proposal(cfg: &RunConfig, manifest: &RunManifest) -> Result<StageOutput, StageFailure> {
    let tool = Tool::BuildCodeProposal;
    let diag = load_diagnosis(manifest, tool)?;
    let repo = RepoSnapshot::load(&cfg.repo, &DEFAULT_IGNORE_DIRS).map_err(|e| StageFailure::new(tool, e))?;
    let hotspots = scan_snapshot(&repo, &cfg.rules.patterns);
    let reasoner = StrategyReasoner::default();
    let proposal = reasoner
        .propose(&repo, &hotspots, &diag, cfg.now)
        .map_err(|e| StageFailure::new(tool, e))?;
    match proposal {
        Some(p) => {
            let (diff, pr) = persist_proposal(&p, &cfg.out).map_err(|e| StageFailure::new(tool, e))?;
            Ok(StageOutput {
                artifacts: vec![diff, pr],
                note: Some(format!("strategy {}, {} hotspot(s)", p.strategy, hotspots.len())),
                strategy: Some(p.strategy),
                ..Default::default()
            })
        }
        None => Ok(StageOutput {
            note: Some(format!("no strategy applies, {} hotspot(s)", hotspots.len())),
            strategy: Some("none".into()),
            ..Default::default()
        }),
    }
}

fn run_tool(cfg: &RunConfig, manifest: &RunManifest, tool: Tool) -> Result<StageOutput, StageFailure> {
    if cfg.fault == Some(tool) {
        return Err(StageFailure {
            trace: injected_trace(tool),
            guard: false,
        });
    }
    fs::create_dir_all(&cfg.out).map_err(|e| StageFailure::new(tool, e))?;
    match tool {
        Tool::UpdateEmobank => update_emobank(cfg),
        Tool::DiagnoseRbt => diagnose_rbt(cfg),
        Tool::BuildPromptPatch => build_prompt_patch(cfg, manifest),
        Tool::BuildCodeProposal => build_code_proposal(cfg, manifest),
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

/// Markdown handed to the operator when a stage falls back.
pub fn remediation_markdown(run_id: &str, thorn: &InternalThorn) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Remediation: {} ({})\n", thorn.tool, thorn.kind);
    let _ = writeln!(s, "Run `{run_id}` continued on the fallback path for `{}`.\n", thorn.tool);
    let _ = writeln!(s, "- Type: `{}`", thorn.kind);
    let _ = writeln!(s, "- Tool: `{}`", thorn.tool);
    let _ = writeln!(s, "- File: `{}`\n", thorn.file.as_deref().unwrap_or("unknown"));
    let _ = writeln!(s, "## Error\n\n```text\n{}\n```\n", thorn.excerpt);
    let _ = writeln!(s, "## Suggested fixes\n");
    for (i, fix) in thorn.suggestions.iter().enumerate() {
        let _ = writeln!(s, "{}. {fix}", i + 1);
    }
    let _ = writeln!(s, "\n## Trace\n\n```text\n{}\n```", thorn.trace.trim_end());
    s
}

fn cached_snapshot(cfg: &RunConfig) -> Option<CachedSnapshot> {
    let text = fs::read_to_string(cfg.out.join(SNAPSHOT_CACHE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Degraded output for `tool`. Best effort: a write failure here is noted, not raised.
fn run_fallback(cfg: &RunConfig, manifest: &RunManifest, tool: Tool, thorn: &InternalThorn) -> io::Result<StageOutput> {
    fs::create_dir_all(&cfg.out)?;
    let ts = timefmt::compact(cfg.now);
    match tool {
        Tool::UpdateEmobank => {
            let cache = cached_snapshot(cfg).unwrap_or_else(|| CachedSnapshot {
                cue: manifest.cue.clone(),
                snapshot: EmoSnapshot::neutral(cfg.now, cfg.half_life_hours),
            });
            let mut text = serde_json::to_string_pretty(&cache).expect("snapshot serializes");
            text.push('\n');
            let path = cfg.out.join("emo_snapshot.provisional.json");
            artifacts::atomic_write(&path, text.as_bytes())?;
            Ok(StageOutput {
                artifacts: vec![path],
                cue: Some(cache.cue),
                ..Default::default()
            })
        }
        Tool::DiagnoseRbt => {
            let (snapshot, cue) = match cached_snapshot(cfg) {
                Some(c) => (c.snapshot, c.cue.or_else(|| manifest.cue.clone())),
                None => (EmoSnapshot::neutral(cfg.now, cfg.half_life_hours), manifest.cue.clone()),
            };
            let diag = rbt::fallback_diagnose(&snapshot, cue.as_deref(), &cfg.rules.prompt_rules);
            let path = diag.write(&cfg.out)?;
            Ok(StageOutput {
                artifacts: vec![path.clone()],
                diagnosis: Some(path),
                ..Default::default()
            })
        }
        Tool::BuildPromptPatch => {
            let mut text = format!(
                "PROVISIONAL: {} failed ({}). The prompt was not changed.\n{}\n\n",
                tool, thorn.kind, thorn.excerpt
            );
            if let Ok(diag) = load_diagnosis(manifest, tool) {
                text.push_str(&prompt_patch::render_adaptive(&diag));
            }
            let path = cfg.out.join("new_prompt.provisional.txt");
            artifacts::atomic_write(&path, text.as_bytes())?;
            Ok(StageOutput {
                artifacts: vec![path],
                ..Default::default()
            })
        }
        Tool::BuildCodeProposal => {
            let dir = cfg.out.join(crate::proposal_engine::PROPOSALS_DIR);
            fs::create_dir_all(&dir)?;
            let text = format!(
                "# Provisional proposal\n\nNo diff was generated: {} failed ({}).\n\n```text\n{}\n```\n",
                tool, thorn.kind, thorn.excerpt
            );
            let path = artifacts::write_unique(&dir, &format!("PR_{ts}_provisional"), "md", text.as_bytes())?;
            Ok(StageOutput {
                artifacts: vec![path],
                strategy: Some("none".into()),
                ..Default::default()
            })
        }
    }
}

fn record_output(manifest: &mut RunManifest, tool: Tool, outcome: OutcomeKind, out: StageOutput) {
    let paths: Vec<String> = out.artifacts.iter().map(|p| path_string(p)).collect();
    if let Some(cue) = out.cue {
        manifest.cue = cue;
    }
    if let Some(d) = out.diagnosis {
        manifest.diagnosis = Some(path_string(&d));
    }
    if out.strategy.is_some() {
        manifest.strategy = out.strategy;
    }
    manifest.artifacts.extend(paths.iter().cloned());
    manifest.records.push(StageRecord {
        tool,
        outcome,
        stage: manifest.stage,
        artifacts: paths,
        note: out.note,
    });
}

/// Run one stage tool inside the error boundary and persist the manifest.
///
/// A failing tool is recorded as an internal thorn, a remediation file is
/// written, its fallback runs, and the stage still advances. Only manifest
/// I/O and out-of-order calls are returned as errors.
pub fn run_stage_guarded(
    cfg: &RunConfig,
    manifest: &mut RunManifest,
    tool: Tool,
) -> Result<StageOutcome, OrchestratorError> {
    let advanced = advance(manifest, tool)?;
    let result = catch_unwind(AssertUnwindSafe(|| run_tool(cfg, manifest, tool))).unwrap_or_else(|payload| {
        Err(StageFailure {
            trace: format!("{tool}: panicked: {}", panic_message(payload.as_ref())),
            guard: false,
        })
    });
    let previous = std::mem::replace(manifest, advanced);
    debug_assert_eq!(previous.stage, tool.requires());

    let outcome = match result {
        Ok(out) => {
            record_output(manifest, tool, OutcomeKind::Ok, out);
            StageOutcome::Ok
        }
        Err(failure) => {
            let thorn = rbt::capture_internal_failure(tool.as_str(), &failure.trace);
            manifest.fallback_used = true;
            manifest.guard_aborted |= failure.guard;
            let mut notes = Vec::new();
            let remediation = fs::create_dir_all(&cfg.out).and_then(|_| {
                artifacts::write_unique(
                    &cfg.out,
                    &format!("remediation_{}", timefmt::compact(cfg.now)),
                    "md",
                    remediation_markdown(&manifest.run_id, &thorn).as_bytes(),
                )
            });
            let mut out = match run_fallback(cfg, &previous, tool, &thorn) {
                Ok(out) => out,
                Err(e) => {
                    notes.push(format!("fallback output not written: {e}"));
                    StageOutput::default()
                }
            };
            match remediation {
                Ok(p) => out.artifacts.insert(0, p),
                Err(e) => notes.push(format!("remediation not written: {e}")),
            }
            notes.insert(0, thorn.kind.clone());
            out.note = Some(notes.join("; "));
            record_output(manifest, tool, OutcomeKind::Degraded, out);
            manifest.internal_thorns.push(thorn.clone());
            StageOutcome::Degraded(thorn)
        }
    };
    manifest.save(&cfg.run_state_path())?;
    Ok(outcome)
}

/// Run all four stages in order under a fresh manifest.
pub fn run_all(cfg: &RunConfig) -> Result<RunManifest, OrchestratorError> {
    cfg.validate(&Tool::ALL)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let mut manifest = RunManifest::new(cfg.now);
    manifest.save(&cfg.run_state_path())?;
    for tool in Tool::ALL {
        run_stage_guarded(cfg, &mut manifest, tool)?;
    }
    Ok(manifest)
}

/// Run a single stage against the persisted manifest, as a separate
/// invocation would. `update_emobank` starts a fresh run when the stored one
/// has finished or when `new_run` is set.
pub fn run_single(cfg: &RunConfig, tool: Tool, new_run: bool) -> Result<(RunManifest, StageOutcome), OrchestratorError> {
    cfg.validate(&[tool])?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let state = cfg.run_state_path();
    let stored = if state.exists() { Some(RunManifest::load(&state)?) } else { None };
    let mut manifest = match stored {
        Some(m) if !(tool == Tool::UpdateEmobank && (new_run || m.stage == Stage::DiffDone)) => m,
        _ => RunManifest::new(cfg.now),
    };
    let outcome = run_stage_guarded(cfg, &mut manifest, tool)?;
    Ok((manifest, outcome))
}

/// Human-readable run summary.
pub fn summary(manifest: &RunManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {} at stage {}", manifest.run_id, manifest.stage);
    for r in &manifest.records {
        let outcome = match r.outcome {
            OutcomeKind::Ok => "ok",
            OutcomeKind::Degraded => "degraded",
        };
        let _ = write!(s, "  {:<20} {outcome}", r.tool.as_str());
        if let Some(note) = &r.note {
            let _ = write!(s, " ({note})");
        }
        s.push('\n');
        for a in &r.artifacts {
            let _ = writeln!(s, "    {a}");
        }
    }
    if let Some(cue) = &manifest.cue {
        let _ = writeln!(s, "cue: {cue}");
    }
    let _ = writeln!(s, "fallback used: {}", manifest.fallback_used);
    if manifest.guard_aborted {
        let _ = writeln!(s, "core identity guard aborted the prompt patch");
    }
    s
}
