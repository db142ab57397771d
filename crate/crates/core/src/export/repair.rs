//! Two-tier record repair: mechanical text fixes, then one model call.

use serde_json::Value;

use crate::backend::{ChatPrompt, Client, SamplingParams};
use crate::extract::first_json_object;
use crate::prompts::REPAIR;

use super::schema::{validate_line, validate_value, RecordKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairTier {
    None,
    Mechanical,
    Llm,
}

impl RepairTier {
    pub fn as_str(self) -> &'static str {
        match self {
            RepairTier::None => "none",
            RepairTier::Mechanical => "mechanical",
            RepairTier::Llm => "llm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unrepairable {
    pub reason: String,
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim().trim_start_matches('\u{feff}');
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // the info string runs to the newline, or to the first non-word char
    // when the fence shares one line with its body
    let body = match rest.split_once('\n') {
        Some((_, b)) => b,
        None => rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric()),
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Drop trailing commas, quote bare object keys and close unbalanced
/// strings and brackets. String contents are left untouched.
pub fn mechanical_fix(raw: &str) -> String {
    let s = strip_fences(raw);
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len() + 8);
    let mut stack: Vec<char> = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_str {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            i += 1;
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                out.push(c);
            }
            '{' | '[' => {
                stack.push(if c == '{' { '}' } else { ']' });
                out.push(c);
            }
            '}' | ']' => {
                if stack.last() == Some(&c) {
                    stack.pop();
                }
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']') | None) {
                    out.push(c);
                }
            }
            c if (c.is_ascii_alphabetic() || c == '_') && stack.last() == Some(&'}') && key_position(&out) => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let rest = chars[i..].iter().find(|c| !c.is_whitespace());
                if rest == Some(&':') {
                    out.push('"');
                    out.push_str(&word);
                    out.push('"');
                } else {
                    out.push_str(&word);
                }
                continue;
            }
            _ => out.push(c),
        }
        i += 1;
    }
    if in_str {
        if escaped {
            out.pop();
        }
        out.push('"');
    }
    while let Some(close) = stack.pop() {
        let trimmed = out.trim_end().trim_end_matches(',').len();
        out.truncate(trimmed);
        out.push(close);
    }
    out
}

fn key_position(out: &str) -> bool {
    matches!(out.trim_end().chars().last(), Some('{') | Some(','))
}

/// Mechanical tier only; `None` when the fixed text is still invalid.
pub fn repair_mechanical(raw: &str, kind: RecordKind) -> Option<Value> {
    let fixed = mechanical_fix(raw);
    if let Ok(v) = validate_line(&fixed, kind) {
        return Some(v);
    }
    let v = Value::Object(first_json_object(&fixed)?);
    validate_value(&v, kind).ok().map(|_| v)
}

pub fn build_repair_prompt(raw: &str, problem: &str, kind: RecordKind) -> ChatPrompt {
    let user = REPAIR.render_user(&[("problem", problem), ("schema", kind.schema_hint()), ("raw", raw)]);
    let params = SamplingParams {
        temperature: 0.0,
        max_output_tokens: 2048,
        stop_sequences: Vec::new(),
    };
    ChatPrompt::new(REPAIR.system(), user, params).with_template(REPAIR.id)
}

/// Repair a record that failed validation. Valid input is returned as is.
pub fn repair_record(
    raw: &str,
    kind: RecordKind,
    client: Option<&Client>,
) -> Result<(Value, RepairTier), Unrepairable> {
    let problem = match validate_line(raw, kind) {
        Ok(v) => return Ok((v, RepairTier::None)),
        Err(e) => e.to_string(),
    };
    if let Some(v) = repair_mechanical(raw, kind) {
        return Ok((v, RepairTier::Mechanical));
    }
    let Some(client) = client else {
        return Err(Unrepairable { reason: problem });
    };
    let reply = client
        .complete(&build_repair_prompt(raw, &problem, kind))
        .map_err(|e| Unrepairable {
            reason: format!("{problem}; repair call failed: {e}"),
        })?;
    let obj = first_json_object(&reply).ok_or_else(|| Unrepairable {
        reason: format!("{problem}; repair reply had no JSON object"),
    })?;
    if obj.get("unrepairable").and_then(Value::as_bool) == Some(true) {
        return Err(Unrepairable {
            reason: format!("{problem}; model declined"),
        });
    }
    let v = Value::Object(obj);
    validate_value(&v, kind).map_err(|e| Unrepairable {
        reason: format!("{problem}; repaired record invalid: {e}"),
    })?;
    Ok((v, RepairTier::Llm))
}
