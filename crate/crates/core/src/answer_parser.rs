//! Turns raw model output into a [`Prediction`].
//!
//! Recovery ladder, first hit wins:
//! 1. strict JSON object, possibly inside a code fence or surrounded by prose
//! 2. the same object after relaxed repair (single quotes, bare keys,
//!    trailing commas, Python literals)
//! 3. the whole response as free text
//!
//! Positions are always read as `[x, y, w, h]` in thousandths.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::{from_prompt_box, round_half_up, NormBox, PromptBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Recovered,
    TextOnly,
    Failed,
}

impl ParseStatus {
    pub fn is_structured(&self) -> bool {
        matches!(self, ParseStatus::Clean | ParseStatus::Recovered)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub content: String,
    #[serde(rename = "box")]
    pub bbox: Option<NormBox>,
    pub status: ParseStatus,
    #[serde(skip)]
    pub raw: String,
}

/// Removes markdown code fences, keeping their contents.
fn strip_fences(raw: &str) -> String {
    if !raw.contains("```") {
        return raw.to_string();
    }
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 3..];
        // drop a language tag on the opening fence line
        let body_start = after
            .find('\n')
            .filter(|&nl| after[..nl].chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == ' '))
            .map_or(0, |nl| nl + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push_str(&body[..end]);
                out.push('\n');
                rest = &body[end + 3..];
            }
            None => {
                out.push_str(body);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Byte offset one past the `}` closing the object opened at `start`.
/// String contents (and their escapes) are skipped; `single_quotes` also
/// treats `'...'` as a string.
fn balanced_end(s: &str, start: usize, single_quotes: bool) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (off, c) in s[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' => quote = Some('"'),
            '\'' if single_quotes => quote = Some('\''),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + off + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn candidates(s: &str, single_quotes: bool) -> impl Iterator<Item = &str> + '_ {
    s.char_indices()
        .filter(|&(_, c)| c == '{')
        .filter_map(move |(i, _)| balanced_end(s, i, single_quotes).map(|end| &s[i..end]))
}

/// First balanced `{...}` region that parses as a JSON object.
pub fn extract_json_object(raw: &str) -> Option<String> {
    let text = strip_fences(raw);
    let found = candidates(&text, false)
        .find(|c| matches!(serde_json::from_str::<Value>(c), Ok(Value::Object(_))))
        .map(str::to_string);
    found
}

/// Best-effort conversion of JSON-ish text into strict JSON.
fn relax(candidate: &str) -> String {
    let chars: Vec<char> = candidate.chars().collect();
    let mut out = String::with_capacity(candidate.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' | '\'' => {
                let q = c;
                out.push('"');
                i += 1;
                while i < chars.len() && chars[i] != q {
                    match chars[i] {
                        '\\' if i + 1 < chars.len() => {
                            if chars[i + 1] == '\'' {
                                out.push('\'');
                            } else {
                                out.push('\\');
                                out.push(chars[i + 1]);
                            }
                            i += 2;
                            continue;
                        }
                        '"' => out.push_str("\\\""),
                        '\n' => out.push_str("\\n"),
                        ch => out.push(ch),
                    }
                    i += 1;
                }
                out.push('"');
                i += 1;
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(',');
                }
                i += 1;
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let next = chars[i..].iter().find(|c| !c.is_whitespace());
                if next == Some(&':') {
                    out.push('"');
                    out.push_str(&word);
                    out.push('"');
                } else {
                    out.push_str(match word.as_str() {
                        "None" | "null" => "null",
                        "True" | "true" => "true",
                        "False" | "false" => "false",
                        _ => &word,
                    });
                }
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

fn lookup<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key)
        .or_else(|| obj.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

/// Answer text and whether it needed coercion.
fn read_content(obj: &Map<String, Value>) -> Option<(String, bool)> {
    let exact = ["content", "value"].iter().find_map(|k| obj.get(*k));
    let (v, mut coerced) = match exact {
        Some(v) => (v, false),
        None => (
            ["content", "value", "answer"].iter().find_map(|k| lookup(obj, k))?,
            true,
        ),
    };
    let text = match v {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => {
            coerced = true;
            n.to_string()
        }
        Value::Bool(b) => {
            coerced = true;
            b.to_string()
        }
        _ => return None,
    };
    (!text.is_empty()).then_some((text, coerced))
}

fn number(v: &Value) -> Option<(f64, bool)> {
    match v {
        Value::Number(n) => n.as_f64().map(|f| (f, false)),
        Value::String(s) => s.trim().parse::<f64>().ok().map(|f| (f, true)),
        _ => None,
    }
    .filter(|(f, _)| f.is_finite())
}

fn corners(v: &Value) -> Option<([f64; 4], bool)> {
    match v {
        Value::Array(arr) if arr.len() == 4 => {
            let mut out = [0.0; 4];
            let mut coerced = false;
            for (slot, item) in out.iter_mut().zip(arr) {
                let (f, c) = number(item)?;
                coerced |= c;
                *slot = f;
            }
            Some((out, coerced))
        }
        // {"x":..,"y":..,"w":..,"h":..}
        Value::Object(m) => {
            let mut out = [0.0; 4];
            for (slot, k) in out.iter_mut().zip(["x", "y", "w", "h"]) {
                *slot = number(lookup(m, k)?)?.0;
            }
            Some((out, true))
        }
        // "[1, 2, 3, 4]"
        Value::String(s) => {
            let inner: Value = serde_json::from_str(s.trim()).ok()?;
            matches!(inner, Value::Array(_)).then_some(())?;
            corners(&inner).map(|(c, _)| (c, true))
        }
        _ => None,
    }
}

/// Box and whether it needed coercion or clamping.
fn read_position(obj: &Map<String, Value>) -> Option<(NormBox, bool)> {
    let (v, coerced) = match obj.get("position") {
        Some(v) => (v, false),
        None => (
            ["position", "bbox", "box"].iter().find_map(|k| lookup(obj, k))?,
            true,
        ),
    };
    let (c, c2) = corners(v)?;
    let conv = from_prompt_box(PromptBox::from(c.map(round_half_up)));
    Some((conv.bbox, coerced || c2 || conv.clamped))
}

fn from_object(obj: &Map<String, Value>, relaxed: bool, raw: &str) -> Prediction {
    let content = read_content(obj);
    if content.is_none() {
        // {"answer": {"content": .., "position": ..}} and similar wrappers
        if let Some(inner) = obj.values().filter_map(Value::as_object).find(|m| read_content(m).is_some()) {
            let mut p = from_object(inner, relaxed, raw);
            if p.status == ParseStatus::Clean {
                p.status = ParseStatus::Recovered;
            }
            return p;
        }
    }
    let position = read_position(obj);
    let (status, text) = match (&content, &position) {
        (Some((text, c1)), Some((_, c2))) => {
            let s = if relaxed || *c1 || *c2 {
                ParseStatus::Recovered
            } else {
                ParseStatus::Clean
            };
            (s, text.clone())
        }
        (Some((text, _)), None) => (ParseStatus::TextOnly, text.clone()),
        (None, _) => (ParseStatus::Failed, String::new()),
    };
    Prediction {
        content: text,
        bbox: position.map(|(b, _)| b),
        status,
        raw: raw.to_string(),
    }
}

fn objects(raw: &str) -> Vec<(Map<String, Value>, bool)> {
    let text = strip_fences(raw);
    let strict = candidates(&text, false).filter_map(|c| serde_json::from_str::<Map<String, Value>>(c).ok());
    let relaxed = candidates(&text, true).filter_map(|c| serde_json::from_str::<Map<String, Value>>(&relax(c)).ok());
    let mut out: Vec<(Map<String, Value>, bool)> = strict.map(|m| (m, false)).collect();
    out.extend(relaxed.map(|m| (m, true)));
    out
}

/// Never fails; the outcome is carried in [`Prediction::status`].
///
/// Every object found in the response is tried, strict parses before
/// repaired ones; the first with both answer and box wins, then the first
/// with an answer only.
pub fn parse_prediction(raw: &str) -> Prediction {
    let mut text_only: Option<Prediction> = None;
    let found = objects(raw);
    let saw_object = !found.is_empty();
    for (obj, relaxed) in found {
        let p = from_object(&obj, relaxed, raw);
        match p.status {
            ParseStatus::Clean | ParseStatus::Recovered => return p,
            ParseStatus::TextOnly if text_only.is_none() => text_only = Some(p),
            _ => {}
        }
    }
    if let Some(p) = text_only {
        return p;
    }
    let text = if saw_object { "" } else { raw.trim() };
    Prediction {
        content: text.to_string(),
        bbox: None,
        // an object without an answer is not free text
        status: if text.is_empty() {
            ParseStatus::Failed
        } else {
            ParseStatus::TextOnly
        },
        raw: raw.to_string(),
    }
}
