//! Source rewrites used by the built-in strategies, plus the reliability
//! utility templates they add to the target repository.

use std::sync::LazyLock;

use regex::Regex;

use super::scanner::Language;

pub const RELIABILITY_STEM: &str = "utils/reliability";
pub const RELIABILITY_FUNCTIONS: [&str; 5] = [
    "to_utc_iso",
    "call_with_retry",
    "structured_toast",
    "wait_for_receipt",
    "gate_success_on_receipt",
];

pub fn reliability_path(lang: Language) -> String {
    format!("{RELIABILITY_STEM}.{}", lang.extension())
}

pub fn reliability_source(lang: Language) -> &'static str {
    match lang {
        Language::Python => PY_RELIABILITY,
        Language::JavaScript => JS_RELIABILITY,
    }
}

const PY_RELIABILITY: &str = r#"import random
import time
from datetime import datetime, timezone

RETRY_BASE_S = 1.0
RETRY_FACTOR = 2.0
RETRY_MAX = 1
RECEIPT_TIMEOUT_S = 30.0
RECEIPT_POLL_S = 0.5

# Host agent sets this to a callable(key) -> bool that asks the backend
# whether the action identified by key has been confirmed.
receipt_probe = None


def to_utc_iso(ts):
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def call_with_retry(fn, retries=RETRY_MAX, base_s=RETRY_BASE_S, factor=RETRY_FACTOR):
    attempt = 0
    while True:
        try:
            return fn()
        except Exception:
            if attempt >= retries:
                raise
            # full jitter
            time.sleep(random.uniform(0, base_s * factor ** attempt))
            attempt += 1


def structured_toast(reason_code, message, emit=print):
    payload = {
        "level": "error",
        "reason": reason_code,
        "message": message,
        "ts": to_utc_iso(datetime.now(timezone.utc)),
    }
    emit(payload)
    return payload


def wait_for_receipt(key=None, timeout_s=RECEIPT_TIMEOUT_S, poll_s=RECEIPT_POLL_S):
    if receipt_probe is None:
        return False
    deadline = time.monotonic() + timeout_s
    while True:
        if receipt_probe(key):
            return True
        if time.monotonic() >= deadline:
            return False
        time.sleep(poll_s)


def gate_success_on_receipt(emit_success, key=None, timeout_s=RECEIPT_TIMEOUT_S):
    if wait_for_receipt(key, timeout_s):
        return emit_success()
    return structured_toast("receipt_timeout", "action not yet confirmed by the backend")
"#;

const JS_RELIABILITY: &str = r#""use strict";

const RETRY_BASE_MS = 1000;
const RETRY_FACTOR = 2;
const RETRY_MAX = 1;
const RECEIPT_TIMEOUT_MS = 30000;
const RECEIPT_POLL_MS = 500;

// Host agent sets this to an async (key) => boolean that asks the backend
// whether the action identified by key has been confirmed.
const hooks = { receiptProbe: null };

const sleep = (ms) => new Promise((resolve) => setTimeout(resolve, ms));

function to_utc_iso(ts) {
  return new Date(ts).toISOString();
}

async function call_with_retry(fn, retries = RETRY_MAX, baseMs = RETRY_BASE_MS, factor = RETRY_FACTOR) {
  for (let attempt = 0; ; attempt++) {
    try {
      return await fn();
    } catch (err) {
      if (attempt >= retries) throw err;
      // full jitter
      await sleep(Math.random() * baseMs * factor ** attempt);
    }
  }
}

function structured_toast(reasonCode, message, emit = console.error) {
  const payload = { level: "error", reason: reasonCode, message, ts: to_utc_iso(new Date()) };
  emit(payload);
  return payload;
}

async function wait_for_receipt(key = null, timeoutMs = RECEIPT_TIMEOUT_MS, pollMs = RECEIPT_POLL_MS) {
  if (!hooks.receiptProbe) return false;
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    if (await hooks.receiptProbe(key)) return true;
    if (Date.now() >= deadline) return false;
    await sleep(pollMs);
  }
}

async function gate_success_on_receipt(emitSuccess, key = null, timeoutMs = RECEIPT_TIMEOUT_MS) {
  if (await wait_for_receipt(key, timeoutMs)) return emitSuccess();
  return structured_toast("receipt_timeout", "action not yet confirmed by the backend");
}

module.exports = { hooks, to_utc_iso, call_with_retry, structured_toast, wait_for_receipt, gate_success_on_receipt };
"#;

/// Byte offset of the start of 1-based `line` in `text`.
pub fn line_offset(text: &str, line: usize) -> Option<usize> {
    if line == 0 {
        return None;
    }
    if line == 1 {
        return Some(0);
    }
    text.match_indices('\n').nth(line - 2).map(|(i, _)| i + 1)
}

/// End offset (exclusive) of the call whose callee name starts at `name_at`,
/// found by matching parentheses outside of string literals.
fn call_end(text: &str, name_at: usize) -> Option<usize> {
    let open = name_at + text[name_at..].find('(')?;
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut i = open;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if b == b'\\' {
                    i += 1;
                } else if b == q {
                    quote = None;
                }
            }
            None => match b {
                b'\'' | b'"' | b'`' => quote = Some(b),
                b'(' => depth += 1,
                b')' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i + 1);
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    None
}

/// Extend a callee start backwards over a dotted receiver (`backend.`).
fn receiver_start(text: &str, mut at: usize) -> usize {
    let bytes = text.as_bytes();
    while at > 0 {
        let b = bytes[at - 1];
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
            at -= 1;
        } else {
            break;
        }
    }
    at
}

/// Wrap the first call matching `callee` on 1-based `line` as
/// `wrapper(<thunk> call)`. Returns `None` when nothing matched or the call
/// is already wrapped.
pub fn wrap_call_on_line(text: &str, line: usize, callee: &Regex, wrapper: &str, lang: Language) -> Option<String> {
    let start = line_offset(text, line)?;
    let end = text[start..].find('\n').map_or(text.len(), |i| start + i);
    let m = callee.find(&text[start..end])?;
    let call_start = receiver_start(text, start + m.start());
    if text[start..call_start].contains(wrapper) {
        return None;
    }
    let call_stop = call_end(text, start + m.start())?;
    let thunk = match lang {
        Language::Python => "lambda: ",
        Language::JavaScript => "() => ",
    };
    let mut out = String::with_capacity(text.len() + wrapper.len() + 16);
    out.push_str(&text[..call_start]);
    out.push_str(wrapper);
    out.push('(');
    out.push_str(thunk);
    out.push_str(&text[call_start..call_stop]);
    out.push(')');
    out.push_str(&text[call_stop..]);
    Some(out)
}

static PY_NAIVE_CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?P<recv>\b[A-Za-z_][\w.]*\.)?\b(?:utcnow|now)\(\s*\)").unwrap());
static PY_STRFTIME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?P<recv>\b[A-Za-z_][\w.]*)\.strftime\(\s*(?:"[^"]*"|'[^']*')\s*\)"#).unwrap());
static PY_FROM_DATETIME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^from datetime import (?P<names>[^\n(]+)$").unwrap());
static PY_IMPORT_DATETIME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^import datetime\s*$").unwrap());

/// Rewrite naive `now()`/`utcnow()` calls on 1-based `line` to aware UTC.
/// Returns the new text and whether `timezone` must be importable.
pub fn py_fix_naive_datetime(text: &str, line: usize) -> Option<(String, bool)> {
    let start = line_offset(text, line)?;
    let end = text[start..].find('\n').map_or(text.len(), |i| start + i);
    let module_style = PY_IMPORT_DATETIME.is_match(text) && !PY_FROM_DATETIME.is_match(text);
    let tz = if module_style { "datetime.timezone.utc" } else { "timezone.utc" };
    let src = &text[start..end];
    let fixed = PY_NAIVE_CALL.replace_all(src, |c: &regex::Captures<'_>| {
        let recv = c.name("recv").map_or("datetime.", |m| m.as_str());
        format!("{recv}now({tz})")
    });
    if fixed == src {
        return None;
    }
    Some((format!("{}{}{}", &text[..start], fixed, &text[end..]), !module_style))
}

/// Replace zone-less `x.strftime("...")` on 1-based `line` with `to_utc_iso(x)`.
pub fn py_fix_strftime(text: &str, line: usize) -> Option<String> {
    let start = line_offset(text, line)?;
    let end = text[start..].find('\n').map_or(text.len(), |i| start + i);
    let src = &text[start..end];
    let fixed = PY_STRFTIME.replace_all(src, "to_utc_iso($recv)");
    (fixed != src).then(|| format!("{}{}{}", &text[..start], fixed, &text[end..]))
}

fn is_py_import(line: &str) -> bool {
    line.starts_with("import ") || line.starts_with("from ")
}

/// Index of the line after the leading import block (or after a module
/// docstring / comment header when there are no imports).
fn py_import_insert_line(lines: &[&str]) -> usize {
    if let Some(last) = lines.iter().rposition(|l| is_py_import(l)) {
        // only trust imports in the header, before any definition
        let first_def = lines
            .iter()
            .position(|l| l.starts_with("def ") || l.starts_with("class ") || l.starts_with("async def "))
            .unwrap_or(lines.len());
        if let Some(last_header) = lines[..first_def.min(lines.len())].iter().rposition(|l| is_py_import(l)) {
            return last_header + 1;
        }
        return last + 1;
    }
    let mut i = 0;
    while i < lines.len() && (lines[i].starts_with('#') || lines[i].trim().is_empty()) {
        i += 1;
    }
    if i < lines.len() {
        let l = lines[i].trim_start();
        for q in ["\"\"\"", "'''"] {
            if let Some(rest) = l.strip_prefix(q) {
                if rest.contains(q) {
                    return i + 1;
                }
                let close = lines[i + 1..].iter().position(|x| x.contains(q)).map_or(i, |p| i + 1 + p);
                return close + 1;
            }
        }
    }
    i
}

fn insert_line(text: &str, at: usize, new_line: &str) -> String {
    let mut lines: Vec<&str> = text.split_inclusive('\n').collect();
    let owned = format!("{new_line}\n");
    if at >= lines.len() {
        let mut s = text.to_string();
        if !s.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
        s.push_str(&owned);
        return s;
    }
    lines.insert(at, &owned);
    lines.concat()
}

/// Make `names` importable from `module`, merging into an existing
/// `from module import ...` line when present.
pub fn py_ensure_from_import(text: &str, module: &str, names: &[&str]) -> String {
    let re = Regex::new(&format!(r"(?m)^from {} import (?P<names>[^\n(]+)$", regex::escape(module))).unwrap();
    if let Some(c) = re.captures(text) {
        let m = c.name("names").unwrap();
        let mut have: Vec<String> = m.as_str().split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        let before = have.len();
        for n in names {
            if !have.iter().any(|h| h == n) {
                have.push(n.to_string());
            }
        }
        if have.len() == before {
            return text.to_string();
        }
        have[..].sort();
        return format!("{}{}{}", &text[..m.start()], have.join(", "), &text[m.end()..]);
    }
    let mut sorted: Vec<&str> = names.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let lines: Vec<&str> = text.lines().collect();
    insert_line(text, py_import_insert_line(&lines), &format!("from {module} import {}", sorted.join(", ")))
}

/// `require` path from `file` (repo-relative) to the reliability module.
pub fn js_require_path(file: &str) -> String {
    let depth = file.matches('/').count();
    let up = if depth == 0 { "./".to_string() } else { "../".repeat(depth) };
    format!("{up}{RELIABILITY_STEM}")
}

/// Make `names` available through a `const { ... } = require(...)` line.
pub fn js_ensure_require(text: &str, file: &str, names: &[&str]) -> String {
    let path = js_require_path(file);
    let re = Regex::new(&format!(
        r#"(?m)^const \{{ (?P<names>[^}}]*) \}} = require\("{}"\);$"#,
        regex::escape(&path)
    ))
    .unwrap();
    if let Some(c) = re.captures(text) {
        let m = c.name("names").unwrap();
        let mut have: Vec<String> = m.as_str().split(',').map(|s| s.trim().to_string()).collect();
        for n in names {
            if !have.iter().any(|h| h == n) {
                have.push(n.to_string());
            }
        }
        have.sort();
        return format!("{}{}{}", &text[..m.start()], have.join(", "), &text[m.end()..]);
    }
    let mut sorted: Vec<&str> = names.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let lines: Vec<&str> = text.lines().collect();
    let at = lines
        .iter()
        .rposition(|l| l.contains("require(") || l.starts_with("import ") || l.trim() == "\"use strict\";")
        .map_or(0, |i| i + 1);
    insert_line(text, at, &format!("const {{ {} }} = require(\"{path}\");", sorted.join(", ")))
}
