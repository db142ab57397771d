use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::counterfactual::{MCQItem, N_OPTIONS};
use crate::generation::QAPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    QaPlain,
    QaCot,
    Mcq,
}

impl Format {
    pub fn as_str(self) -> &'static str {
        match self {
            Format::QaPlain => "qa_plain",
            Format::QaCot => "qa_cot",
            Format::Mcq => "mcq",
        }
    }

    pub fn parse(s: &str) -> Option<Format> {
        match s {
            "qa_plain" => Some(Format::QaPlain),
            "qa_cot" => Some(Format::QaCot),
            "mcq" => Some(Format::Mcq),
            _ => None,
        }
    }

    /// Kind of pipeline record this format is rendered from.
    pub fn source_kind(self) -> RecordKind {
        match self {
            Format::Mcq => RecordKind::McqItem,
            _ => RecordKind::QaPair,
        }
    }
}

/// Shapes a JSONL line can be checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    QaPair,
    McqItem,
    Export(Format),
}

impl RecordKind {
    /// Shape description handed to the repair model.
    pub fn schema_hint(self) -> &'static str {
        match self {
            RecordKind::QaPair => {
                r#"{"qa_id": string, "segment_id": string, "question": string, "answer": string, "qtype": "explicit" | "implicit", "reasoning": string | null, "provenance": "generated" | "regenerated_in_qc"}"#
            }
            RecordKind::McqItem => {
                r#"{"qa_id": string, "stem": string, "options": [string, string, string, string], "correct_index": 0-3, "nuanced_index": 0-3, "rng_seed_used": integer}"#
            }
            RecordKind::Export(Format::Mcq) => r#"{"stem": string, "options": [string, string, string, string], "answer_letter": "A" | "B" | "C" | "D"}"#,
            RecordKind::Export(_) => r#"{"instruction": string, "input": string, "output": string}"#,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema error at {path}: {reason}")]
pub struct SchemaError {
    pub path: String,
    pub reason: String,
}

fn err(path: &str, reason: impl Into<String>) -> SchemaError {
    SchemaError {
        path: path.into(),
        reason: reason.into(),
    }
}

fn exact_keys(obj: &Map<String, Value>, keys: &[&str]) -> Result<(), SchemaError> {
    for k in keys {
        if !obj.contains_key(*k) {
            return Err(err(k, "missing"));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(err(extra, "unexpected field"));
    }
    Ok(())
}

fn string<'a>(obj: &'a Map<String, Value>, key: &str, non_empty: bool) -> Result<&'a str, SchemaError> {
    let s = obj.get(key).and_then(Value::as_str).ok_or_else(|| err(key, "type: expected string"))?;
    if non_empty && s.trim().is_empty() {
        return Err(err(key, "empty"));
    }
    Ok(s)
}

fn check_options(obj: &Map<String, Value>) -> Result<(), SchemaError> {
    let options = obj
        .get("options")
        .and_then(Value::as_array)
        .ok_or_else(|| err("options", "type: expected array"))?;
    if options.len() != N_OPTIONS {
        return Err(err("options", "cardinality"));
    }
    for (i, o) in options.iter().enumerate() {
        match o.as_str() {
            Some(s) if !s.trim().is_empty() => {}
            _ => return Err(err(&format!("options[{i}]"), "expected non-empty string")),
        }
    }
    Ok(())
}

/// Structural check of a parsed record.
pub fn validate_value(v: &Value, kind: RecordKind) -> Result<(), SchemaError> {
    let obj = v.as_object().ok_or_else(|| err("$", "type: expected object"))?;
    match kind {
        RecordKind::Export(Format::Mcq) => {
            exact_keys(obj, &["stem", "options", "answer_letter"])?;
            string(obj, "stem", true)?;
            check_options(obj)?;
            match string(obj, "answer_letter", true)? {
                "A" | "B" | "C" | "D" => Ok(()),
                _ => Err(err("answer_letter", "range")),
            }
        }
        RecordKind::Export(_) => {
            exact_keys(obj, &["instruction", "input", "output"])?;
            string(obj, "instruction", true)?;
            string(obj, "input", false)?;
            string(obj, "output", true)?;
            Ok(())
        }
        RecordKind::QaPair => {
            let qa: QAPair = serde_json::from_value(v.clone()).map_err(|e| err("$", e.to_string()))?;
            qa.check().map_err(|r| err("$", r))
        }
        RecordKind::McqItem => {
            check_options(obj)?;
            let item: MCQItem = serde_json::from_value(v.clone()).map_err(|e| err("$", e.to_string()))?;
            item.check().map_err(|r| err("$", r))
        }
    }
}

pub fn validate_line(line: &str, kind: RecordKind) -> Result<Value, SchemaError> {
    let v: Value = serde_json::from_str(line).map_err(|e| err("$", format!("parse: {e}")))?;
    validate_value(&v, kind)?;
    Ok(v)
}

/// Validate one exported line.
pub fn validate_record(line: &str, format: Format) -> Result<(), SchemaError> {
    validate_line(line, RecordKind::Export(format)).map(drop)
}
