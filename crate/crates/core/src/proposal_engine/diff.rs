//! Unified diff rendering and a strict, zero-fuzz applier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use similar::{ChangeTag, TextDiff};

use super::ProposalError;

pub const CONTEXT_LINES: usize = 3;
const NO_NEWLINE: &str = "\\ No newline at end of file";

/// One file's change. `before` is `None` for a new file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEdit {
    pub path: String,
    pub before: Option<String>,
    pub after: String,
}

impl FileEdit {
    pub fn is_noop(&self) -> bool {
        self.before.as_deref() == Some(self.after.as_str())
    }
}

/// Render edits as one unified diff, files in path order.
pub fn render_unified(edits: &[FileEdit]) -> String {
    let mut edits: Vec<&FileEdit> = edits.iter().filter(|e| !e.is_noop()).collect();
    edits.sort_by(|a, b| a.path.cmp(&b.path));
    let mut out = String::new();
    for e in edits {
        let old = e.before.as_deref().unwrap_or("");
        let a = if e.before.is_some() { format!("a/{}", e.path) } else { "/dev/null".to_string() };
        render_file(&mut out, &a, &format!("b/{}", e.path), old, &e.after);
    }
    out
}

struct Row<'a> {
    tag: char,
    text: &'a str,
    missing_newline: bool,
}

fn range(start: usize, len: usize) -> String {
    // an empty range names the line before it
    match len {
        0 => format!("{start},0"),
        1 => format!("{}", start + 1),
        _ => format!("{},{len}", start + 1),
    }
}

/// Line matching comes from `similar`; positions and hunk headers are
/// counted here from the change sequence alone.
fn render_file(out: &mut String, a: &str, b: &str, old: &str, new: &str) {
    let diff = TextDiff::from_lines(old, new);
    let rows: Vec<Row<'_>> = diff
        .iter_all_changes()
        .map(|c| Row {
            tag: match c.tag() {
                ChangeTag::Equal => ' ',
                ChangeTag::Delete => '-',
                ChangeTag::Insert => '+',
            },
            text: c.value(),
            missing_newline: c.missing_newline(),
        })
        .collect();
    let changed: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.tag != ' ').map(|(i, _)| i).collect();
    if changed.is_empty() {
        return;
    }
    // (first row, last row) per hunk, merging changes whose context overlaps
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for &i in &changed {
        let lo = i.saturating_sub(CONTEXT_LINES);
        let hi = (i + CONTEXT_LINES).min(rows.len() - 1);
        match spans.last_mut() {
            Some(last) if lo <= last.1 + 1 => last.1 = hi,
            _ => spans.push((lo, hi)),
        }
    }
    let _ = writeln!(out, "--- {a}");
    let _ = writeln!(out, "+++ {b}");
    let (mut old_pos, mut new_pos, mut row) = (0usize, 0usize, 0usize);
    for (lo, hi) in spans {
        for r in &rows[row..lo] {
            old_pos += usize::from(r.tag != '+');
            new_pos += usize::from(r.tag != '-');
        }
        let hunk = &rows[lo..=hi];
        let old_len = hunk.iter().filter(|r| r.tag != '+').count();
        let new_len = hunk.iter().filter(|r| r.tag != '-').count();
        let _ = writeln!(out, "@@ -{} +{} @@", range(old_pos, old_len), range(new_pos, new_len));
        for r in hunk {
            out.push(r.tag);
            out.push_str(r.text);
            if r.missing_newline {
                out.push('\n');
                out.push_str(NO_NEWLINE);
                out.push('\n');
            }
        }
        old_pos += old_len;
        new_pos += new_len;
        row = hi + 1;
    }
}

#[derive(Debug)]
struct Hunk {
    old_start: usize,
    old_len: usize,
    /// (tag, line including terminator)
    lines: Vec<(char, String)>,
}

#[derive(Debug)]
struct FilePatch {
    old: Option<String>,
    new: Option<String>,
    hunks: Vec<Hunk>,
}

fn bad(msg: impl Into<String>) -> ProposalError {
    ProposalError::DiffDoesNotApply(msg.into())
}

fn strip_prefix_path(raw: &str, prefix: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        None
    } else {
        Some(raw.strip_prefix(prefix).unwrap_or(raw).to_string())
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), ProposalError> {
    let (start, len) = match s.split_once(',') {
        Some((a, b)) => (a, b),
        None => (s, "1"),
    };
    let p = |x: &str| x.parse::<usize>().map_err(|_| bad(format!("bad hunk range {s:?}")));
    Ok((p(start)?, p(len)?))
}

fn parse(diff: &str) -> Result<Vec<FilePatch>, ProposalError> {
    let lines: Vec<&str> = diff.split_inclusive('\n').collect();
    let mut files: Vec<FilePatch> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if let Some(old) = line.strip_prefix("--- ") {
            let new = lines
                .get(i + 1)
                .and_then(|l| l.strip_prefix("+++ "))
                .ok_or_else(|| bad("--- without +++"))?;
            files.push(FilePatch {
                old: strip_prefix_path(old.trim_end_matches('\n'), "a/"),
                new: strip_prefix_path(new.trim_end_matches('\n'), "b/"),
                hunks: Vec::new(),
            });
            i += 2;
            continue;
        }
        if let Some(rest) = line.strip_prefix("@@ -") {
            let file = files.last_mut().ok_or_else(|| bad("hunk before file header"))?;
            let (ranges, _) = rest.split_once(" @@").ok_or_else(|| bad("unterminated hunk header"))?;
            let (old, new) = ranges.split_once(" +").ok_or_else(|| bad("bad hunk header"))?;
            let (old_start, old_len) = parse_range(old)?;
            let (_, new_len) = parse_range(new)?;
            let mut hunk = Hunk {
                old_start,
                old_len,
                lines: Vec::new(),
            };
            i += 1;
            let (mut seen_old, mut seen_new) = (0, 0);
            while i < lines.len() && (seen_old < old_len || seen_new < new_len || lines[i].starts_with('\\')) {
                let l = lines[i];
                if l.trim_end_matches('\n') == NO_NEWLINE {
                    let last = hunk.lines.last_mut().ok_or_else(|| bad("stray no-newline marker"))?;
                    if last.1.ends_with('\n') {
                        last.1.pop();
                    }
                    i += 1;
                    continue;
                }
                let tag = l.chars().next().ok_or_else(|| bad("empty hunk line"))?;
                match tag {
                    ' ' => {
                        seen_old += 1;
                        seen_new += 1;
                    }
                    '-' => seen_old += 1,
                    '+' => seen_new += 1,
                    _ => return Err(bad(format!("unexpected hunk line {l:?}"))),
                }
                hunk.lines.push((tag, l[1..].to_string()));
                i += 1;
            }
            if seen_old != old_len || seen_new != new_len {
                return Err(bad("hunk line counts do not match header"));
            }
            file.hunks.push(hunk);
            continue;
        }
        if line.trim().is_empty() || line.starts_with("diff ") || line.starts_with("index ") {
            i += 1;
            continue;
        }
        return Err(bad(format!("unexpected line {line:?}")));
    }
    Ok(files)
}

fn apply_file(original: &str, patch: &FilePatch) -> Result<String, ProposalError> {
    let src: Vec<&str> = original.split_inclusive('\n').collect();
    let mut out = String::with_capacity(original.len());
    let mut cursor = 0usize;
    for h in &patch.hunks {
        // zero-length old ranges name the line before the insertion point
        let at = if h.old_len == 0 { h.old_start } else { h.old_start.saturating_sub(1) };
        if at < cursor || at > src.len() {
            return Err(bad(format!("hunk at line {} is out of order or out of range", h.old_start)));
        }
        for l in &src[cursor..at] {
            out.push_str(l);
        }
        let mut pos = at;
        for (tag, text) in &h.lines {
            match tag {
                ' ' | '-' => {
                    match src.get(pos) {
                        Some(actual) if actual == text => {}
                        Some(actual) => {
                            return Err(bad(format!("context mismatch at line {}: expected {text:?}, found {actual:?}", pos + 1)))
                        }
                        None => return Err(bad(format!("context runs past end of file at line {}", pos + 1))),
                    }
                    if *tag == ' ' {
                        out.push_str(text);
                    }
                    pos += 1;
                }
                _ => out.push_str(text),
            }
        }
        cursor = pos;
    }
    for l in &src[cursor..] {
        out.push_str(l);
    }
    Ok(out)
}

/// Apply `diff` to `files` with no fuzz and no offset search.
/// Returns the full post-patch file map.
pub fn apply_unified(files: &BTreeMap<String, String>, diff: &str) -> Result<BTreeMap<String, String>, ProposalError> {
    let mut result = files.clone();
    for patch in parse(diff)? {
        match (&patch.old, &patch.new) {
            (None, Some(new)) => {
                if result.contains_key(new) {
                    return Err(bad(format!("{new} already exists")));
                }
                let created = apply_file("", &patch)?;
                result.insert(new.clone(), created);
            }
            (Some(old), Some(new)) => {
                let original = result.remove(old).ok_or_else(|| bad(format!("{old} does not exist")))?;
                let patched = apply_file(&original, &patch)?;
                result.insert(new.clone(), patched);
            }
            (Some(old), None) => {
                let original = result.remove(old).ok_or_else(|| bad(format!("{old} does not exist")))?;
                if !apply_file(&original, &patch)?.is_empty() {
                    return Err(bad(format!("deletion of {old} leaves content")));
                }
            }
            (None, None) => return Err(bad("both sides are /dev/null")),
        }
    }
    Ok(result)
}
