//! Pulls the JSON answer out of raw model output and coerces it onto the task schema.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{format_number, FieldKind, FieldSpec, FieldValue};
use crate::prompt::StrategyKind;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
}

/// The raw JSON text chosen from a model response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JsonBlock {
    pub json: String,
    /// True when no ```json fence was found and a bare object was used instead.
    pub repaired: bool,
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

/// Removes `<think>…</think>` spans. A closing tag with no opener (some
/// reasoning models omit the opening tag) discards everything before it; an
/// unterminated opener is left in place.
pub fn strip_think(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        match (rest.find(THINK_OPEN), rest.find(THINK_CLOSE)) {
            (Some(o), Some(c)) if o < c => {
                out.push_str(&rest[..o]);
                rest = &rest[c + THINK_CLOSE.len()..];
            }
            (_, Some(c)) => {
                out.clear();
                rest = &rest[c + THINK_CLOSE.len()..];
            }
            (_, None) => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

/// Contents of every ```json fenced block, in order of appearance.
fn json_fences(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find("```") {
        let open = pos + off;
        let after = &text[open + 3..];
        if after.len() >= 4 && after[..4].eq_ignore_ascii_case("json") {
            let body_start = open + 3 + 4;
            match text[body_start..].find("```") {
                Some(len) => {
                    blocks.push(text[body_start..body_start + len].trim());
                    pos = body_start + len + 3;
                }
                None => break,
            }
        } else {
            pos = open + 3;
        }
    }
    blocks
}

/// Byte spans of balanced top-level `{…}` groups, ignoring braces inside
/// string literals once an object has opened.
fn balanced_objects(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let (mut depth, mut start) = (0usize, 0usize);
    let (mut in_str, mut escaped) = (false, false);
    for (i, ch) in text.char_indices() {
        if depth > 0 && in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' if depth > 0 => in_str = true,
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    spans
}

/// Selects the answer JSON: think spans are dropped, then the last ```json
/// block wins; failing that, the last balanced object (flagged as a repair).
pub fn extract_json_block(text: &str) -> Result<JsonBlock, ParseError> {
    let cleaned = strip_think(text);
    if let Some(last) = json_fences(&cleaned).pop() {
        return Ok(JsonBlock { json: last.to_string(), repaired: false });
    }
    let spans = balanced_objects(&cleaned);
    let parses = |&(a, b): &(usize, usize)| serde_json::from_str::<Value>(&cleaned[a..b]).map(|v| v.is_object()).unwrap_or(false);
    let chosen = spans.iter().rev().find(|s| parses(s)).or(spans.last());
    match chosen {
        Some(&(a, b)) => Ok(JsonBlock { json: cleaned[a..b].to_string(), repaired: true }),
        None => Err(ParseError::NoJsonFound),
    }
}

/// Renders values as the fenced block the prompts ask for.
pub fn render_fenced<'a>(values: impl IntoIterator<Item = (&'a String, &'a FieldValue)>) -> String {
    let map: IndexMap<&String, &FieldValue> = values.into_iter().collect();
    format!("```json\n{}\n```", serde_json::to_string_pretty(&map).expect("field values serialize"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFlags {
    #[serde(default)]
    pub parse_failed: bool,
    #[serde(default)]
    pub repaired: bool,
    #[serde(default)]
    pub defaults_applied: Vec<String>,
    #[serde(default)]
    pub coercions: Vec<String>,
    #[serde(default)]
    pub invalid: Vec<String>,
    #[serde(default)]
    pub unknown_keys: Vec<String>,
    /// Fields left at their default because a gated graph node did not run.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl RecordFlags {
    pub fn merge(&mut self, other: RecordFlags) {
        self.parse_failed |= other.parse_failed;
        self.repaired |= other.repaired;
        self.defaults_applied.extend(other.defaults_applied);
        self.coercions.extend(other.coercions);
        self.invalid.extend(other.invalid);
        self.unknown_keys.extend(other.unknown_keys);
        self.skipped.extend(other.skipped);
    }
}

/// Values for every field of a task (or graph node), plus what it took to get them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub values: IndexMap<String, FieldValue>,
    pub flags: RecordFlags,
}

impl ParsedRecord {
    /// Every field at its default; used for unparseable or failed outputs.
    pub fn defaults(fields: &[FieldSpec], parse_failed: bool) -> Self {
        ParsedRecord {
            values: fields.iter().map(|f| (f.name.clone(), f.default.clone())).collect(),
            flags: RecordFlags {
                parse_failed,
                defaults_applied: fields.iter().map(|f| f.name.clone()).collect(),
                ..RecordFlags::default()
            },
        }
    }
}

/// One model's parsed answers for one report under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub report_id: String,
    pub model_id: String,
    pub strategy: StrategyKind,
    pub values: IndexMap<String, FieldValue>,
    pub flags: RecordFlags,
}

impl ExtractionRecord {
    pub fn new(report_id: impl Into<String>, model_id: impl Into<String>, strategy: StrategyKind, parsed: ParsedRecord) -> Self {
        ExtractionRecord {
            report_id: report_id.into(),
            model_id: model_id.into(),
            strategy,
            values: parsed.values,
            flags: parsed.flags,
        }
    }
}

enum Coercion {
    Exact(FieldValue),
    Coerced(FieldValue),
    Absent,
    Rejected,
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => n.as_f64().map(format_number),
        Value::Bool(true) => Some("Yes".into()),
        Value::Bool(false) => Some("No".into()),
        _ => None,
    }
}

fn coerce_choice(field: &FieldSpec, v: &Value, missing: &str) -> Coercion {
    let Some(s) = scalar_text(v) else { return Coercion::Rejected };
    let exact = matches!(v, Value::String(_)) && (s == missing || field.options.contains(&s));
    if exact {
        return Coercion::Exact(FieldValue::Text(s));
    }
    let key = norm(&s);
    field
        .options
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(missing))
        .find(|o| norm(o) == key)
        .map(|o| Coercion::Coerced(FieldValue::text(o)))
        .unwrap_or(Coercion::Rejected)
}

fn coerce_numeric(v: &Value, missing: &str) -> Coercion {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if x.is_finite() => Coercion::Exact(FieldValue::Number(x)),
            _ => Coercion::Rejected,
        },
        Value::String(s) if s == missing => Coercion::Exact(FieldValue::text(missing)),
        Value::String(s) if s.trim().is_empty() || norm(s) == norm(missing) => Coercion::Coerced(FieldValue::text(missing)),
        Value::String(s) => match s.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Coercion::Coerced(FieldValue::Number(x)),
            _ => Coercion::Rejected,
        },
        _ => Coercion::Rejected,
    }
}

fn coerce_list(v: &Value, missing: &str) -> Coercion {
    match v {
        Value::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            let mut changed = false;
            for item in items {
                match item {
                    Value::String(s) => out.push(s.clone()),
                    Value::Null => changed = true,
                    other => match scalar_text(other) {
                        Some(s) => {
                            out.push(s);
                            changed = true;
                        }
                        None => return Coercion::Rejected,
                    },
                }
            }
            if changed {
                Coercion::Coerced(FieldValue::List(out))
            } else {
                Coercion::Exact(FieldValue::List(out))
            }
        }
        Value::String(s) if s.trim().is_empty() || s == missing => Coercion::Coerced(FieldValue::List(Vec::new())),
        other => match scalar_text(other) {
            Some(s) => Coercion::Coerced(FieldValue::List(vec![s])),
            None => Coercion::Rejected,
        },
    }
}

fn coerce(field: &FieldSpec, v: &Value, missing: &str) -> Coercion {
    if v.is_null() {
        return Coercion::Absent;
    }
    match field.kind {
        FieldKind::Categorical | FieldKind::Binary => coerce_choice(field, v, missing),
        FieldKind::Numeric => coerce_numeric(v, missing),
        FieldKind::List => coerce_list(v, missing),
        FieldKind::FreeText => match v {
            Value::String(s) => Coercion::Exact(FieldValue::Text(s.clone())),
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar_text).collect();
                parts.map_or(Coercion::Rejected, |p| Coercion::Coerced(FieldValue::Text(p.join(", "))))
            }
            other => scalar_text(other).map_or(Coercion::Rejected, |s| Coercion::Coerced(FieldValue::Text(s))),
        },
        FieldKind::ExactString => match v {
            Value::String(s) => Coercion::Exact(FieldValue::Text(s.clone())),
            Value::Number(_) => scalar_text(v).map_or(Coercion::Rejected, |s| Coercion::Coerced(FieldValue::Text(s))),
            _ => Coercion::Rejected,
        },
    }
}

/// Maps a raw JSON object onto `fields`. Total for any JSON object: missing
/// keys take defaults, unknown keys are ignored, and every adjustment is flagged.
pub fn parse_record(raw: &str, fields: &[FieldSpec], missing_token: &str) -> Result<ParsedRecord, ParseError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ParseError::MalformedJson("top-level value is not an object".into()));
    };
    let mut flags = RecordFlags::default();
    for key in obj.keys() {
        if !fields.iter().any(|f| f.name == *key) {
            flags.unknown_keys.push(key.clone());
        }
    }
    let mut values = IndexMap::with_capacity(fields.len());
    for field in fields {
        let v = match obj.get(&field.name).map(|v| coerce(field, v, missing_token)) {
            Some(Coercion::Exact(v)) => v,
            Some(Coercion::Coerced(v)) => {
                flags.coercions.push(field.name.clone());
                v
            }
            Some(Coercion::Rejected) => {
                flags.invalid.push(field.name.clone());
                flags.defaults_applied.push(field.name.clone());
                field.default.clone()
            }
            Some(Coercion::Absent) | None => {
                flags.defaults_applied.push(field.name.clone());
                field.default.clone()
            }
        };
        values.insert(field.name.clone(), v);
    }
    Ok(ParsedRecord { values, flags })
}

/// Extraction plus parsing; never fails, falling back to an all-defaults record.
pub fn parse_response(text: &str, fields: &[FieldSpec], missing_token: &str) -> ParsedRecord {
    let attempt = extract_json_block(text).and_then(|block| {
        let mut rec = parse_record(&block.json, fields, missing_token)?;
        rec.flags.repaired = block.repaired;
        Ok(rec)
    });
    attempt.unwrap_or_else(|_| ParsedRecord::defaults(fields, true))
}
