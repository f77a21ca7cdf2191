//! Adaptive-section prompt rewriting with a byte-exact core-identity guard.
//!
//! A prompt holds exactly one adaptive section and at most one core-identity
//! block, each delimited by marker lines. Only the body of the adaptive
//! section is ever replaced; every candidate output is re-parsed and its
//! core-identity span compared byte for byte before anything is written.

use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::artifacts;
use crate::rbt::RbtDiagnosis;
use crate::timefmt;

pub const BEGIN_ADAPTIVE: &str = "BEGIN_ADAPTIVE_SECTION";
pub const END_ADAPTIVE: &str = "END_ADAPTIVE_SECTION";
pub const BEGIN_CORE: &str = "BEGIN_CORE_IDENTITY";
pub const END_CORE: &str = "END_CORE_IDENTITY";
pub const NEW_PROMPT_FILE: &str = "new_prompt.txt";
pub const NO_CHANGES: &str = "no changes required";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{message} (byte {offset})")]
    Structural { offset: usize, message: String },
    #[error("core identity guard: {reason} at byte {offset}")]
    Guard { offset: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn structural(offset: usize, message: impl Into<String>) -> PromptError {
    PromptError::Structural {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    BeginAdaptive,
    EndAdaptive,
    BeginCore,
    EndCore,
}

/// A marker occupies its whole line; leading `#` characters are tolerated
/// so both `## BEGIN_ADAPTIVE_SECTION` and a bare `BEGIN_CORE_IDENTITY` match.
fn marker(line: &str) -> Option<Marker> {
    match line.trim().trim_start_matches('#').trim() {
        BEGIN_ADAPTIVE => Some(Marker::BeginAdaptive),
        END_ADAPTIVE => Some(Marker::EndAdaptive),
        BEGIN_CORE => Some(Marker::BeginCore),
        END_CORE => Some(Marker::EndCore),
        _ => None,
    }
}

/// Parsed prompt. Spans are byte ranges into the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDocument {
    text: String,
    /// Adaptive body: from after the BEGIN line to the start of the END line.
    adaptive: Range<usize>,
    /// Core block, from the start of its BEGIN line to the end of its END line.
    core: Option<Range<usize>>,
}

struct Line {
    start: usize,
    /// End of content, excluding the line terminator.
    end: usize,
    /// Start of the next line.
    next: usize,
}

fn lines(text: &str) -> impl Iterator<Item = Line> + '_ {
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= text.len() {
            return None;
        }
        let start = pos;
        let (end, next) = match text[start..].find('\n') {
            Some(i) => (start + i, start + i + 1),
            None => (text.len(), text.len()),
        };
        pos = next;
        Some(Line { start, end, next })
    })
}

pub fn parse_prompt(text: &str) -> Result<PromptDocument, PromptError> {
    let mut adaptive_begin: Option<Line> = None;
    let mut adaptive: Option<Range<usize>> = None;
    let mut core_begin: Option<usize> = None;
    let mut core: Option<Range<usize>> = None;

    for line in lines(text) {
        let Some(m) = marker(&text[line.start..line.end]) else {
            continue;
        };
        let at = line.start;
        match m {
            Marker::BeginAdaptive => {
                if adaptive_begin.is_some() || adaptive.is_some() {
                    return Err(structural(at, "duplicate adaptive section"));
                }
                if core_begin.is_some() {
                    return Err(structural(at, "adaptive section overlaps core identity"));
                }
                adaptive_begin = Some(line);
            }
            Marker::EndAdaptive => match adaptive_begin.take() {
                Some(begin) => adaptive = Some(begin.next..line.start),
                None if adaptive.is_some() => return Err(structural(at, "duplicate adaptive section")),
                None => return Err(structural(at, "END_ADAPTIVE_SECTION without BEGIN")),
            },
            Marker::BeginCore => {
                if core_begin.is_some() || core.is_some() {
                    return Err(structural(at, "duplicate core identity block"));
                }
                if adaptive_begin.is_some() {
                    return Err(structural(at, "core identity overlaps adaptive section"));
                }
                core_begin = Some(at);
            }
            Marker::EndCore => match core_begin.take() {
                Some(begin) => core = Some(begin..line.end),
                None if core.is_some() => return Err(structural(at, "duplicate core identity block")),
                None => return Err(structural(at, "END_CORE_IDENTITY without BEGIN")),
            },
        }
    }
    if let Some(begin) = adaptive_begin {
        return Err(structural(begin.start, "BEGIN_ADAPTIVE_SECTION without END"));
    }
    if let Some(begin) = core_begin {
        return Err(structural(begin, "BEGIN_CORE_IDENTITY without END"));
    }
    let adaptive = adaptive.ok_or_else(|| structural(text.len(), "no adaptive section"))?;
    Ok(PromptDocument {
        text: text.to_string(),
        adaptive,
        core,
    })
}

impl PromptDocument {
    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn adaptive_span(&self) -> Range<usize> {
        self.adaptive.clone()
    }

    pub fn core_span(&self) -> Option<Range<usize>> {
        self.core.clone()
    }

    pub fn adaptive(&self) -> &str {
        &self.text[self.adaptive.clone()]
    }

    pub fn core_identity(&self) -> Option<&str> {
        self.core.clone().map(|r| &self.text[r])
    }

    fn first_marker(&self) -> usize {
        let adaptive_line = self.text[..self.adaptive.start]
            .trim_end_matches('\n')
            .rfind('\n')
            .map_or(0, |i| i + 1);
        self.core.as_ref().map_or(adaptive_line, |c| c.start.min(adaptive_line))
    }

    fn last_marker_end(&self) -> usize {
        let adaptive_end = self.text[self.adaptive.end..]
            .find('\n')
            .map_or(self.text.len(), |i| self.adaptive.end + i);
        self.core.as_ref().map_or(adaptive_end, |c| c.end.max(adaptive_end))
    }

    pub fn preamble(&self) -> &str {
        &self.text[..self.first_marker()]
    }

    pub fn postamble(&self) -> &str {
        &self.text[self.last_marker_end()..]
    }

    /// Reassemble from parts; identical to the parsed input.
    pub fn serialize(&self) -> String {
        let (pre, mid, post) = (self.first_marker(), self.last_marker_end(), self.text.len());
        let mut out = String::with_capacity(post);
        out.push_str(&self.text[..pre]);
        out.push_str(&self.text[pre..mid]);
        out.push_str(&self.text[mid..post]);
        out
    }

    /// Text with the adaptive body replaced by `body`.
    pub fn with_adaptive(&self, body: &str) -> String {
        let mut out = String::with_capacity(self.text.len() + body.len());
        out.push_str(&self.text[..self.adaptive.start]);
        out.push_str(body);
        out.push_str(&self.text[self.adaptive.end..]);
        out
    }
}

/// Produces the adaptive body from a diagnosis.
pub trait AdaptiveRenderer {
    fn render(&self, diagnosis: &RbtDiagnosis) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateRenderer;

impl AdaptiveRenderer for TemplateRenderer {
    fn render(&self, diagnosis: &RbtDiagnosis) -> String {
        render_adaptive(diagnosis)
    }
}

pub fn render_adaptive(diagnosis: &RbtDiagnosis) -> String {
    let mut out = format!(
        "Reflection as of {} (fallback: {})\n",
        timefmt::format_utc(diagnosis.as_of),
        diagnosis.fallback
    );
    if diagnosis.prompt_rules_to_add.is_empty() {
        out.push_str(NO_CHANGES);
        out.push('\n');
        return out;
    }
    for rule in &diagnosis.prompt_rules_to_add {
        out.push_str("- ");
        out.push_str(rule);
        out.push('\n');
    }
    out.push_str("Top thorn: ");
    out.push_str(diagnosis.top_thorn.as_deref().unwrap_or("none"));
    out.push('\n');
    out
}

/// Candidate bytes with the adaptive body replaced. Not yet guarded.
pub fn build_candidate(doc: &PromptDocument, diagnosis: &RbtDiagnosis, renderer: &dyn AdaptiveRenderer) -> Vec<u8> {
    doc.with_adaptive(&renderer.render(diagnosis)).into_bytes()
}

fn first_difference(a: &[u8], b: &[u8]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y).or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())))
}

/// Verify that `candidate` keeps `old`'s core-identity block byte for byte,
/// at the position implied by the adaptive rewrite, and still parses.
pub fn guard_core_identity(old: &PromptDocument, candidate: &[u8]) -> Result<PromptDocument, PromptError> {
    let violation = |offset, reason: &str| PromptError::Guard {
        offset,
        reason: reason.to_string(),
    };
    let text = std::str::from_utf8(candidate).map_err(|e| violation(e.valid_up_to(), "output is not UTF-8"))?;

    if let Some(core) = &old.core {
        let shift = candidate.len() as isize - old.text.len() as isize;
        let expected = if core.start >= old.adaptive.end {
            (core.start as isize + shift).max(0) as usize
        } else {
            core.start
        };
        let old_bytes = &old.text.as_bytes()[core.clone()];
        let window = candidate.get(expected..).unwrap_or(&[]);
        let window = &window[..window.len().min(old_bytes.len())];
        if let Some(i) = first_difference(old_bytes, window) {
            return Err(violation(expected + i, "core identity bytes differ"));
        }
    }

    let new = parse_prompt(text).map_err(|e| match e {
        PromptError::Structural { offset, message } => violation(offset, &format!("output no longer parses: {message}")),
        other => other,
    })?;
    match (&old.core, &new.core) {
        (None, None) => Ok(new),
        (Some(a), Some(b)) => match first_difference(&old.text.as_bytes()[a.clone()], &candidate[b.clone()]) {
            None => Ok(new),
            Some(i) => Err(violation(b.start + i, "core identity bytes differ")),
        },
        (None, Some(b)) => Err(violation(b.start, "core identity block introduced")),
        (Some(a), None) => Err(violation(a.start.min(candidate.len()), "core identity block removed")),
    }
}

/// Rewrite the adaptive section of `old` for `diagnosis`, guarded.
pub fn apply_prompt_patch(
    old: &str,
    diagnosis: &RbtDiagnosis,
    renderer: &dyn AdaptiveRenderer,
) -> Result<String, PromptError> {
    let doc = parse_prompt(old)?;
    let candidate = build_candidate(&doc, diagnosis, renderer);
    guard_core_identity(&doc, &candidate)?;
    Ok(String::from_utf8(candidate).expect("guard checked UTF-8"))
}

/// Guard `candidate` against `old`, then atomically write it to
/// `out_dir/new_prompt.txt`. Nothing is written when the guard fails.
pub fn commit_prompt(out_dir: &Path, old: &PromptDocument, candidate: &[u8]) -> Result<PathBuf, PromptError> {
    guard_core_identity(old, candidate)?;
    let path = out_dir.join(NEW_PROMPT_FILE);
    let io_err = |source| PromptError::Io {
        path: path.clone(),
        source,
    };
    std::fs::create_dir_all(out_dir).map_err(io_err)?;
    artifacts::atomic_write(&path, candidate).map_err(io_err)?;
    Ok(path)
}

/// Read, patch, guard and write in one step.
pub fn patch_prompt_file(
    prompt: &Path,
    out_dir: &Path,
    diagnosis: &RbtDiagnosis,
    renderer: &dyn AdaptiveRenderer,
) -> Result<PathBuf, PromptError> {
    let old = std::fs::read_to_string(prompt).map_err(|source| PromptError::Io {
        path: prompt.to_path_buf(),
        source,
    })?;
    let doc = parse_prompt(&old)?;
    let candidate = build_candidate(&doc, diagnosis, renderer);
    commit_prompt(out_dir, &doc, &candidate)
}
