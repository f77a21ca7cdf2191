//! Remediation strategies: scored against a diagnosis, each producing edits.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use super::diff::FileEdit;
use super::rewrite;
use super::scanner::Language;
use super::scanner::{Hotspot, RepoSnapshot, BARE_API_CALL, MIXED_TIMESTAMP_FORMAT, NAIVE_DATETIME, UNGATED_TOAST};
use super::ProposalError;
use crate::rbt::RbtDiagnosis;

pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;
    /// Non-negative and deterministic for fixed inputs.
    fn score(&self, diagnosis: &RbtDiagnosis, hotspots: &[Hotspot]) -> f64;
    /// Edits against `repo`. Never touches the filesystem.
    fn transform(&self, repo: &RepoSnapshot, hotspots: &[Hotspot]) -> Result<Vec<FileEdit>, ProposalError>;
    fn rationale(&self) -> String;
}

fn count(hotspots: &[Hotspot], ids: &[&str]) -> usize {
    hotspots.iter().filter(|h| ids.contains(&h.pattern_id.as_str())).count()
}

static TOAST_CALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(?:show_toast|toast|notify)\(").unwrap());
static API_CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:call_tool|requests\.(?:get|post|put|patch|delete)|urlopen|fetch)\(").unwrap());

/// Working copy of the files a strategy edits, plus the helper names each
/// file now needs imported.
struct Workspace<'a> {
    repo: &'a RepoSnapshot,
    lang: Language,
    files: std::collections::BTreeMap<String, String>,
    needs: std::collections::BTreeMap<String, BTreeSet<&'static str>>,
    needs_timezone: BTreeSet<String>,
}

impl<'a> Workspace<'a> {
    fn new(repo: &'a RepoSnapshot) -> Self {
        Workspace {
            repo,
            lang: repo.dominant_language(),
            files: Default::default(),
            needs: Default::default(),
            needs_timezone: Default::default(),
        }
    }

    fn text(&mut self, path: &str) -> Result<&mut String, ProposalError> {
        if !self.files.contains_key(path) {
            let src = self
                .repo
                .files
                .get(path)
                .ok_or_else(|| ProposalError::Transform(format!("{path} is not in the scanned snapshot")))?;
            self.files.insert(path.to_string(), src.clone());
        }
        Ok(self.files.get_mut(path).expect("inserted above"))
    }

    fn need(&mut self, path: &str, name: &'static str) {
        self.needs.entry(path.to_string()).or_default().insert(name);
    }

    /// Apply `f` to the file; record `helper` as needed when it changed something.
    fn edit(
        &mut self,
        path: &str,
        helper: Option<&'static str>,
        f: impl FnOnce(&str) -> Option<String>,
    ) -> Result<bool, ProposalError> {
        let text = self.text(path)?;
        match f(text) {
            Some(new) => {
                *text = new;
                if let Some(h) = helper {
                    self.need(path, h);
                }
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn finish(mut self) -> Vec<FileEdit> {
        let module_path = rewrite::reliability_path(self.lang);
        for path in std::mem::take(&mut self.needs_timezone) {
            let t = self.files.get_mut(&path).expect("edited file");
            *t = rewrite::py_ensure_from_import(t, "datetime", &["timezone"]);
        }
        let needs = std::mem::take(&mut self.needs);
        for (path, names) in &needs {
            let names: Vec<&str> = names.iter().copied().collect();
            let t = self.files.get_mut(path).expect("edited file");
            *t = match Language::from_path(path).unwrap_or(self.lang) {
                Language::Python => rewrite::py_ensure_from_import(t, "utils.reliability", &names),
                Language::JavaScript => rewrite::js_ensure_require(t, path, &names),
            };
        }
        let mut edits: Vec<FileEdit> = self
            .files
            .into_iter()
            .map(|(path, after)| FileEdit {
                before: self.repo.files.get(&path).cloned(),
                path,
                after,
            })
            .filter(|e| !e.is_noop())
            .collect();
        if !needs.is_empty() && !self.repo.files.contains_key(&module_path) {
            edits.push(FileEdit {
                path: module_path,
                before: None,
                after: rewrite::reliability_source(self.lang).to_string(),
            });
        }
        edits.sort_by(|a, b| a.path.cmp(&b.path));
        edits
    }
}

/// UTC-aware timestamps plus receipt-gated success toasts.
#[derive(Debug, Clone, Copy, Default)]
pub struct TzReceiptStrategy;

impl Strategy for TzReceiptStrategy {
    fn name(&self) -> &str {
        "TZReceiptStrategy"
    }

    fn score(&self, diagnosis: &RbtDiagnosis, hotspots: &[Hotspot]) -> f64 {
        let relevant = diagnosis
            .top_thorn
            .as_deref()
            .is_some_and(|c| c.contains("toast") || c.contains("receipt"));
        let n = count(hotspots, &[NAIVE_DATETIME, UNGATED_TOAST]);
        if relevant && n > 0 {
            1.0 + 0.25 * n as f64
        } else {
            0.0
        }
    }

    fn transform(&self, repo: &RepoSnapshot, hotspots: &[Hotspot]) -> Result<Vec<FileEdit>, ProposalError> {
        let mut ws = Workspace::new(repo);
        for h in hotspots {
            let lang = Language::from_path(&h.file);
            match (h.pattern_id.as_str(), lang) {
                (UNGATED_TOAST, Some(l)) => {
                    ws.edit(&h.file, Some("gate_success_on_receipt"), |t| {
                        rewrite::wrap_call_on_line(t, h.line, &TOAST_CALL, "gate_success_on_receipt", l)
                    })?;
                }
                (NAIVE_DATETIME, Some(Language::Python)) => {
                    let mut tz = false;
                    ws.edit(&h.file, None, |t| {
                        rewrite::py_fix_naive_datetime(t, h.line).map(|(s, need)| {
                            tz = need;
                            s
                        })
                    })?;
                    if tz {
                        ws.needs_timezone.insert(h.file.clone());
                    }
                }
                (MIXED_TIMESTAMP_FORMAT, Some(Language::Python)) => {
                    ws.edit(&h.file, Some("to_utc_iso"), |t| rewrite::py_fix_strftime(t, h.line))?;
                }
                _ => {}
            }
        }
        Ok(ws.finish())
    }

    fn rationale(&self) -> String {
        "Success toasts fire before the backend confirms the action, and timestamps are built without a zone. \
         The patch adds a reliability utility, gates each flagged toast on receipt confirmation, and makes \
         flagged timestamps UTC-aware."
            .into()
    }
}

/// Wraps bare network/tool calls in a single jittered retry.
#[derive(Debug, Clone, Copy, Default)]
pub struct RetryErrorsStrategy;

impl Strategy for RetryErrorsStrategy {
    fn name(&self) -> &str {
        "RetryErrorsStrategy"
    }

    fn score(&self, diagnosis: &RbtDiagnosis, hotspots: &[Hotspot]) -> f64 {
        let failing = diagnosis.thorns.iter().any(|t| t.cause.ends_with(":fail") || t.cause.ends_with(":error"));
        let n = count(hotspots, &[BARE_API_CALL]);
        if failing && n > 0 {
            0.5 + 0.5 * (1.0 - 0.5f64.powi(n as i32))
        } else {
            0.0
        }
    }

    fn transform(&self, repo: &RepoSnapshot, hotspots: &[Hotspot]) -> Result<Vec<FileEdit>, ProposalError> {
        let mut ws = Workspace::new(repo);
        for h in hotspots.iter().filter(|h| h.pattern_id == BARE_API_CALL) {
            if let Some(l) = Language::from_path(&h.file) {
                ws.edit(&h.file, Some("call_with_retry"), |t| {
                    rewrite::wrap_call_on_line(t, h.line, &API_CALL, "call_with_retry", l)
                })?;
            }
        }
        Ok(ws.finish())
    }

    fn rationale(&self) -> String {
        "Tool and network calls fail without a second attempt. The patch wraps each flagged call in a single retry \
         with jittered exponential backoff."
            .into()
    }
}

pub fn default_registry() -> Vec<Box<dyn Strategy>> {
    vec![Box::new(TzReceiptStrategy), Box::new(RetryErrorsStrategy)]
}

/// Highest-scoring strategy; ties go to the earlier entry; all-zero gives `None`.
pub fn select_strategy<'r>(
    diagnosis: &RbtDiagnosis,
    hotspots: &[Hotspot],
    registry: &'r [Box<dyn Strategy>],
) -> Option<&'r dyn Strategy> {
    let mut best: Option<(&dyn Strategy, f64)> = None;
    for s in registry {
        let score = s.score(diagnosis, hotspots);
        if score > 0.0 && best.is_none_or(|(_, b)| score > b) {
            best = Some((s.as_ref(), score));
        }
    }
    best.map(|(s, _)| s)
}
