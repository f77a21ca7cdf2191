//! Read-only code proposals: scan the target repo for hotspots, pick a
//! remediation strategy for the diagnosis, and emit a unified diff with a PR
//! note. The target repository is never written.

pub mod diff;
pub mod rewrite;
pub mod scanner;
pub mod strategy;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::rbt::RbtDiagnosis;
use crate::timefmt;

pub use diff::{apply_unified, render_unified, FileEdit};
pub use scanner::{scan_hotspots, scan_snapshot, Hotspot, Language, PatternTable, RepoSnapshot};
pub use strategy::{default_registry, select_strategy, RetryErrorsStrategy, Strategy, TzReceiptStrategy};

pub const PROPOSALS_DIR: &str = "proposals";
pub const DEFAULT_REASONER: &str = "deterministic";

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid pattern {id}: {reason}")]
    InvalidPattern { id: String, reason: String },
    #[error("transform failed: {0}")]
    Transform(String),
    #[error("generated diff does not apply: {0}")]
    DiffDoesNotApply(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchProposal {
    pub diff: String,
    pub pr_note: String,
    pub created_at: DateTime<Utc>,
    pub strategy: String,
    pub reasoner: String,
    pub files: Vec<String>,
}

impl PatchProposal {
    fn prefixes(&self) -> (&'static str, &'static str) {
        if self.reasoner == DEFAULT_REASONER {
            ("patch_", "PR_")
        } else {
            ("LLM_patch_", "LLM_PR_")
        }
    }
}

fn pr_note(
    strategy: &dyn Strategy,
    diagnosis: &RbtDiagnosis,
    hotspots: &[Hotspot],
    edits: &[FileEdit],
    created_at: DateTime<Utc>,
) -> String {
    let top = diagnosis.top_thorn.as_deref().unwrap_or("none");
    let mut s = String::new();
    let _ = writeln!(s, "# {}: remediation for `{top}`\n", strategy.name());
    let _ = writeln!(s, "Generated {} from diagnosis as of {}{}.\n", timefmt::format_utc(created_at), timefmt::format_utc(diagnosis.as_of), if diagnosis.fallback { " (fallback)" } else { "" });
    let _ = writeln!(s, "## Diagnosis\n");
    let _ = writeln!(s, "- Top thorn: `{top}`");
    let _ = writeln!(s, "- Roses: {}, buds: {}, thorns: {}", diagnosis.roses.len(), diagnosis.buds.len(), diagnosis.thorns.len());
    for t in &diagnosis.thorns {
        let _ = writeln!(s, "- Thorn `{}` ({}) score {:.3}", t.cause, t.emotion, t.score);
    }
    let _ = writeln!(s, "\n## Hotspots\n");
    if hotspots.is_empty() {
        let _ = writeln!(s, "- none");
    }
    for h in hotspots {
        let _ = writeln!(s, "- `{}:{}` {}: `{}`", h.file, h.line, h.pattern_id, h.excerpt.trim());
    }
    let _ = writeln!(s, "\n## Rationale\n\n{}\n", strategy.rationale());
    let _ = writeln!(s, "## Files\n");
    for e in edits {
        let _ = writeln!(s, "- `{}`{}", e.path, if e.before.is_none() { " (new)" } else { "" });
    }
    let _ = writeln!(s, "\nThis proposal was not applied. Review and apply with `git apply` or `patch -p1`.");
    s
}

/// Run `strategy` against `repo` and render the result. The diff is checked
/// against the snapshot with the strict applier before it is returned.
pub fn generate_proposal(
    strategy: &dyn Strategy,
    repo: &RepoSnapshot,
    hotspots: &[Hotspot],
    diagnosis: &RbtDiagnosis,
    created_at: DateTime<Utc>,
) -> Result<PatchProposal, ProposalError> {
    let edits = strategy.transform(repo, hotspots)?;
    if edits.is_empty() {
        return Err(ProposalError::Transform(format!("{} produced no edits", strategy.name())));
    }
    let diff = render_unified(&edits);
    let applied = apply_unified(&repo.files, &diff)?;
    for e in &edits {
        if applied.get(&e.path) != Some(&e.after) {
            return Err(ProposalError::DiffDoesNotApply(format!("{} does not round-trip", e.path)));
        }
    }
    Ok(PatchProposal {
        pr_note: pr_note(strategy, diagnosis, hotspots, &edits, created_at),
        diff,
        created_at,
        strategy: strategy.name().to_string(),
        reasoner: DEFAULT_REASONER.to_string(),
        files: edits.into_iter().map(|e| e.path).collect(),
    })
}

/// Produces a proposal (or none) for a diagnosis. The deterministic strategy
/// engine is the only shipped implementation.
pub trait Reasoner {
    fn name(&self) -> &str;
    fn propose(
        &self,
        repo: &RepoSnapshot,
        hotspots: &[Hotspot],
        diagnosis: &RbtDiagnosis,
        created_at: DateTime<Utc>,
    ) -> Result<Option<PatchProposal>, ProposalError>;
}

pub struct StrategyReasoner {
    pub registry: Vec<Box<dyn Strategy>>,
}

impl Default for StrategyReasoner {
    fn default() -> Self {
        StrategyReasoner {
            registry: default_registry(),
        }
    }
}

impl Reasoner for StrategyReasoner {
    fn name(&self) -> &str {
        DEFAULT_REASONER
    }

    fn propose(
        &self,
        repo: &RepoSnapshot,
        hotspots: &[Hotspot],
        diagnosis: &RbtDiagnosis,
        created_at: DateTime<Utc>,
    ) -> Result<Option<PatchProposal>, ProposalError> {
        select_strategy(diagnosis, hotspots, &self.registry)
            .map(|s| generate_proposal(s, repo, hotspots, diagnosis, created_at))
            .transpose()
    }
}

/// Write `proposals/<prefix>patch_<ts>.diff` and `<prefix>PR_<ts>.md` under
/// `out_dir`, suffixing both with `-2`, `-3`, ... when either name is taken.
pub fn persist_proposal(p: &PatchProposal, out_dir: &Path) -> Result<(PathBuf, PathBuf), ProposalError> {
    let dir = out_dir.join(PROPOSALS_DIR);
    std::fs::create_dir_all(&dir).map_err(|source| ProposalError::Io {
        path: dir.clone(),
        source,
    })?;
    let (patch_prefix, pr_prefix) = p.prefixes();
    let ts = timefmt::compact(p.created_at);
    for n in 1.. {
        let suffix = if n == 1 { String::new() } else { format!("-{n}") };
        let diff_path = dir.join(format!("{patch_prefix}{ts}{suffix}.diff"));
        let pr_path = dir.join(format!("{pr_prefix}{ts}{suffix}.md"));
        if diff_path.exists() || pr_path.exists() {
            continue;
        }
        match crate::artifacts::write_new(&diff_path, p.diff.as_bytes()) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(source) => return Err(ProposalError::Io { path: diff_path, source }),
        }
        if let Err(source) = crate::artifacts::write_new(&pr_path, p.pr_note.as_bytes()) {
            let _ = std::fs::remove_file(&diff_path);
            if source.kind() == std::io::ErrorKind::AlreadyExists {
                continue;
            }
            return Err(ProposalError::Io { path: pr_path, source });
        }
        return Ok((diff_path, pr_path));
    }
    unreachable!("unbounded suffix search")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appraisal::Emotion;
    use crate::rbt::RbtItem;
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 10, 31, 23, 0, 0).unwrap()
    }

    fn toast_diag() -> RbtDiagnosis {
        let mut d = RbtDiagnosis::empty(now());
        d.thorns.push(RbtItem {
            cause: "reminder.toast:fail".into(),
            emotion: Emotion::Frustration,
            score: 2.5,
            evidence: vec![1, 2],
        });
        d.top_thorn = Some("reminder.toast:fail".into());
        d
    }

    fn repo(files: &[(&str, &str)]) -> RepoSnapshot {
        RepoSnapshot {
            files: files.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            ..Default::default()
        }
    }

    const APP: &str = "from datetime import datetime\n\nfrom notifier import show_toast\n\n\ndef remind(text):\n    at = datetime.now()\n    show_toast(f\"set {text}\")\n    return at\n";

    #[test]
    fn tz_receipt_proposal_fixes_toasts() {
        let r = repo(&[("app.py", APP)]);
        let table = PatternTable::default();
        let hs = scan_snapshot(&r, &table);
        assert_eq!(hs.len(), 2);
        let p = StrategyReasoner::default().propose(&r, &hs, &toast_diag(), now()).unwrap().unwrap();
        assert_eq!(p.strategy, "TZReceiptStrategy");
        assert_eq!(p.files, vec!["app.py", "utils/reliability.py"]);
        let after = apply_unified(&r.files, &p.diff).unwrap();
        assert!(after["app.py"].contains("gate_success_on_receipt(lambda: show_toast(f\"set {text}\"))"));
        assert!(after["app.py"].contains("from datetime import datetime, timezone\n"));
        assert!(after["app.py"].contains("from utils.reliability import gate_success_on_receipt\n"));
        let rescanned = scan_snapshot(&RepoSnapshot { files: after, ..Default::default() }, &table);
        assert!(rescanned.is_empty(), "{rescanned:?}");
        assert!(p.pr_note.contains("reminder.toast:fail"));
    }

    #[test]
    fn proposals_are_deterministic() {
        let r = repo(&[("app.py", APP)]);
        let hs = scan_snapshot(&r, &PatternTable::default());
        let a = StrategyReasoner::default().propose(&r, &hs, &toast_diag(), now()).unwrap();
        let b = StrategyReasoner::default().propose(&r, &hs, &toast_diag(), now()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_strategy_no_proposal() {
        let r = repo(&[("app.py", "x = 1\n")]);
        let p = StrategyReasoner::default().propose(&r, &[], &RbtDiagnosis::empty(now()), now()).unwrap();
        assert!(p.is_none());
    }

    #[test]
    fn persist_names_and_collisions() {
        let r = repo(&[("app.py", APP)]);
        let hs = scan_snapshot(&r, &PatternTable::default());
        let p = StrategyReasoner::default().propose(&r, &hs, &toast_diag(), now()).unwrap().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (d1, m1) = persist_proposal(&p, dir.path()).unwrap();
        let (d2, m2) = persist_proposal(&p, dir.path()).unwrap();
        let name = |p: &Path| p.file_name().unwrap().to_str().unwrap().to_string();
        assert_eq!(name(&d1), "patch_20251031T230000Z.diff");
        assert_eq!(name(&m1), "PR_20251031T230000Z.md");
        assert_eq!(name(&d2), "patch_20251031T230000Z-2.diff");
        assert_eq!(name(&m2), "PR_20251031T230000Z-2.md");
        assert!(std::fs::read_to_string(&m1).unwrap().contains("reminder.toast:fail"));

        let mut llm = p.clone();
        llm.reasoner = "external".into();
        let (d3, m3) = persist_proposal(&llm, dir.path()).unwrap();
        assert_eq!(name(&d3), "LLM_patch_20251031T230000Z.diff");
        assert_eq!(name(&m3), "LLM_PR_20251031T230000Z.md");
    }

    #[test]
    fn partial_pair_is_not_reused() {
        let r = repo(&[("app.py", APP)]);
        let hs = scan_snapshot(&r, &PatternTable::default());
        let p = StrategyReasoner::default().propose(&r, &hs, &toast_diag(), now()).unwrap().unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(PROPOSALS_DIR)).unwrap();
        std::fs::write(dir.path().join(PROPOSALS_DIR).join("PR_20251031T230000Z.md"), "taken").unwrap();
        let (d, _) = persist_proposal(&p, dir.path()).unwrap();
        assert!(d.ends_with("patch_20251031T230000Z-2.diff"));
        assert!(!dir.path().join(PROPOSALS_DIR).join("patch_20251031T230000Z.diff").exists());
    }
}
