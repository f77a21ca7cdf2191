//! Regex hotspot scanner over an in-memory repository snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::ProposalError;

pub const DEFAULT_IGNORE_DIRS: [&str; 6] = [".git", "node_modules", "target", "__pycache__", ".venv", "output"];

pub const NAIVE_DATETIME: &str = "naive_datetime";
pub const UNGATED_TOAST: &str = "ungated_toast";
pub const BARE_API_CALL: &str = "bare_api_call";
pub const MIXED_TIMESTAMP_FORMAT: &str = "mixed_timestamp_format";

const BINARY_SNIFF_BYTES: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hotspot {
    pub file: String,
    pub line: usize,
    pub pattern_id: String,
    pub excerpt: String,
}

/// Text files of a repository keyed by `/`-separated relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepoSnapshot {
    pub root: PathBuf,
    pub files: BTreeMap<String, String>,
    pub skipped_binary: usize,
    pub skipped_unreadable: usize,
}

impl RepoSnapshot {
    pub fn load(root: &Path, ignore_dirs: &[&str]) -> Result<Self, ProposalError> {
        let meta = std::fs::metadata(root).map_err(|source| ProposalError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        if !meta.is_dir() {
            return Err(ProposalError::Io {
                path: root.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
            });
        }
        let mut snap = RepoSnapshot {
            root: root.to_path_buf(),
            ..Default::default()
        };
        let walker = WalkDir::new(root).sort_by_file_name().into_iter().filter_entry(|e| {
            e.depth() == 0 || !(e.file_type().is_dir() && ignore_dirs.iter().any(|d| e.file_name() == *d))
        });
        for entry in walker {
            let entry = match entry {
                Ok(e) => e,
                Err(_) => {
                    snap.skipped_unreadable += 1;
                    continue;
                }
            };
            if !entry.file_type().is_file() {
                continue;
            }
            let Ok(bytes) = std::fs::read(entry.path()) else {
                snap.skipped_unreadable += 1;
                continue;
            };
            if bytes[..bytes.len().min(BINARY_SNIFF_BYTES)].contains(&0) {
                snap.skipped_binary += 1;
                continue;
            }
            let Ok(text) = String::from_utf8(bytes) else {
                snap.skipped_binary += 1;
                continue;
            };
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            snap.files.insert(rel, text);
        }
        Ok(snap)
    }

    /// Most common source language among the snapshot's files.
    pub fn dominant_language(&self) -> Language {
        let (mut py, mut js) = (0usize, 0usize);
        for path in self.files.keys() {
            match Language::from_path(path) {
                Some(Language::Python) => py += 1,
                Some(Language::JavaScript) => js += 1,
                None => {}
            }
        }
        if js > py {
            Language::JavaScript
        } else {
            Language::Python
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    JavaScript,
}

impl Language {
    pub fn from_path(path: &str) -> Option<Language> {
        let ext = path.rsplit_once('.').map(|(_, e)| e)?;
        match ext {
            "py" => Some(Language::Python),
            "js" | "mjs" | "cjs" | "ts" => Some(Language::JavaScript),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Language::Python => "py",
            Language::JavaScript => "js",
        }
    }
}

/// Serializable form of a pattern rule, as read from a rules file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternRuleSpec {
    pub id: String,
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unless_line: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unless_in_span: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PatternRule {
    pub id: String,
    pub pattern: Regex,
    /// Suppresses a match when the same line also matches.
    pub unless_line: Option<Regex>,
    /// Suppresses a match when the enclosing function, up to and including
    /// the matched line, contains a match.
    pub unless_in_span: Option<Regex>,
}

impl PatternRule {
    pub fn compile(spec: &PatternRuleSpec) -> Result<Self, ProposalError> {
        let re = |src: &str| {
            Regex::new(src).map_err(|e| ProposalError::InvalidPattern {
                id: spec.id.clone(),
                reason: e.to_string(),
            })
        };
        Ok(PatternRule {
            id: spec.id.clone(),
            pattern: re(&spec.pattern)?,
            unless_line: spec.unless_line.as_deref().map(re).transpose()?,
            unless_in_span: spec.unless_in_span.as_deref().map(re).transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PatternTable {
    pub rules: Vec<PatternRule>,
}

pub fn default_rule_specs() -> Vec<PatternRuleSpec> {
    let spec = |id: &str, pattern: &str, unless_line: Option<&str>, unless_in_span: Option<&str>| PatternRuleSpec {
        id: id.into(),
        pattern: pattern.into(),
        unless_line: unless_line.map(Into::into),
        unless_in_span: unless_in_span.map(Into::into),
    };
    vec![
        spec(NAIVE_DATETIME, r"\b(?:utcnow|now)\(\s*\)", Some(r"\bDate\.now\("), None),
        spec(
            UNGATED_TOAST,
            r"\b(?:show_toast|toast|notify)\(",
            None,
            Some(r"\b(?:wait_for_receipt|gate_success_on_receipt|receipt_confirmed)\b"),
        ),
        spec(
            BARE_API_CALL,
            r"\b(?:call_tool|requests\.(?:get|post|put|patch|delete)|urlopen|fetch)\(",
            Some(r"(?i)retry"),
            None,
        ),
        spec(MIXED_TIMESTAMP_FORMAT, r"\.strftime\(", Some(r"%[zZ]|Z['\x22]"), None),
    ]
}

impl Default for PatternTable {
    fn default() -> Self {
        PatternTable::from_specs(&default_rule_specs()).expect("built-in patterns compile")
    }
}

impl PatternTable {
    pub fn from_specs(specs: &[PatternRuleSpec]) -> Result<Self, ProposalError> {
        Ok(PatternTable {
            rules: specs.iter().map(PatternRule::compile).collect::<Result<_, _>>()?,
        })
    }
}

static DEFINITION: std::sync::LazyLock<Regex> = std::sync::LazyLock::new(|| {
    Regex::new(r"^\s*(?:async\s+def|def|(?:pub(?:\([^)]*\))?\s+)?(?:async\s+)?fn|(?:export\s+)?(?:async\s+)?function)\b").unwrap()
});

fn indent(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

fn is_comment(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with('#') || t.starts_with("//")
}

/// Start of the function block enclosing `idx`: the nearest preceding
/// definition line indented less than `idx`, or line 0.
fn span_start(lines: &[&str], idx: usize) -> usize {
    let mut limit = indent(lines[idx]);
    for j in (0..idx).rev() {
        let l = lines[j];
        if l.trim().is_empty() || indent(l) >= limit {
            continue;
        }
        if DEFINITION.is_match(l) {
            return j;
        }
        limit = indent(l);
    }
    0
}

/// Scan one file's text. `file` is the relative path recorded on hits.
pub fn scan_text(file: &str, text: &str, table: &PatternTable) -> Vec<Hotspot> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        if is_comment(line) || DEFINITION.is_match(line) {
            continue;
        }
        for rule in &table.rules {
            if !rule.pattern.is_match(line) {
                continue;
            }
            if rule.unless_line.as_ref().is_some_and(|r| r.is_match(line)) {
                continue;
            }
            if let Some(gate) = &rule.unless_in_span {
                let from = span_start(&lines, idx);
                if lines[from..=idx].iter().any(|l| !is_comment(l) && gate.is_match(l)) {
                    continue;
                }
            }
            out.push(Hotspot {
                file: file.to_string(),
                line: idx + 1,
                pattern_id: rule.id.clone(),
                excerpt: line.to_string(),
            });
        }
    }
    out
}

pub fn scan_snapshot(snapshot: &RepoSnapshot, table: &PatternTable) -> Vec<Hotspot> {
    let mut out: Vec<Hotspot> = snapshot
        .files
        .iter()
        .flat_map(|(path, text)| scan_text(path, text, table))
        .collect();
    out.sort();
    out
}

/// Scan a directory with the default ignore list.
pub fn scan_hotspots(root: &Path, table: &PatternTable) -> Result<Vec<Hotspot>, ProposalError> {
    Ok(scan_snapshot(&RepoSnapshot::load(root, &DEFAULT_IGNORE_DIRS)?, table))
}
