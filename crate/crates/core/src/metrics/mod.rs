//! Scoring of predictions against references, and the answer-position audit
//! for multiple-choice items.

mod semsim;
mod text;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::counterfactual::{MCQItem, N_OPTIONS};

pub use semsim::{cosine, cosine_to_percent, semsim, Embedder, HashingEmbedder, HttpEmbedder};
pub use text::{
    bleu, bleu_detail, bleu_tokens, exact_match, lcs_len, normalize_answer, rouge_l, rouge_n, rouge_tokens, token_f1,
    BleuBreakdown,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub f1: f64,
    pub em: f64,
    pub bleu: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub semsim: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("nothing to score")]
    Empty,
    #[error("{0}")]
    Input(String),
}

/// F1, EM and ROUGE are per-pair means; BLEU is corpus level. SemSim is
/// omitted when no embedder is given or the embedder fails.
pub fn score(preds: &[&str], refs: &[&str], embedder: Option<&dyn Embedder>) -> Result<ScoreReport, MetricsError> {
    if preds.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = preds.len() as f64;
    let mean = |f: &dyn Fn(&str, &str) -> f64| preds.iter().zip(refs).map(|(p, r)| f(p, r)).sum::<f64>() / n;
    let semsim = embedder.and_then(|e| {
        let scores: Result<Vec<f64>, String> = preds.iter().zip(refs).map(|(p, r)| semsim(p, r, e)).collect();
        match scores {
            Ok(s) => Some(s.iter().sum::<f64>() / n),
            Err(err) => {
                tracing::warn!("semsim omitted: {err}");
                None
            }
        }
    });
    Ok(ScoreReport {
        f1: mean(&token_f1),
        em: mean(&exact_match),
        bleu: bleu(preds, refs, 4).expect("lengths checked"),
        rouge2: mean(&|p, r| rouge_n(p, r, 2)),
        rouge_l: mean(&rouge_l),
        semsim,
        n: preds.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionAudit {
    pub counts: [u64; N_OPTIONS],
    pub chi_square: f64,
    pub p_value: f64,
}

/// Pearson chi-square against a uniform distribution over the cells, with
/// `cells - 1` degrees of freedom. Returns `(statistic, p_value)`.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return (0.0, 1.0);
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    (stat, (1.0 - dist.cdf(stat)).clamp(0.0, 1.0))
}

pub fn audit_counts(counts: [u64; N_OPTIONS]) -> PositionAudit {
    let (chi_square, p_value) = chi_square_uniform(&counts);
    PositionAudit {
        counts,
        chi_square,
        p_value,
    }
}

pub fn position_bias_audit(items: &[MCQItem]) -> Result<PositionAudit, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = [0u64; N_OPTIONS];
    for it in items {
        counts[it.correct_index.min(N_OPTIONS - 1)] += 1;
    }
    Ok(audit_counts(counts))
}

/// A scored text, optionally keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyed {
    pub id: Option<String>,
    pub text: String,
}

const ID_FIELDS: [&str; 2] = ["id", "qa_id"];
const TEXT_FIELDS: [&str; 6] = ["prediction", "reference", "answer", "output", "text", "gold"];

/// Parse a JSONL file of predictions or references. A line is either a JSON
/// string or an object holding an id (`id`/`qa_id`) and a text field
/// (`prediction`, `reference`, `answer`, `output`, `text` or `gold`).
pub fn parse_keyed_jsonl(text: &str) -> Result<Vec<Keyed>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |why: &str| MetricsError::Input(format!("line {}: {why}", i + 1));
            match serde_json::from_str::<Value>(l).map_err(|e| bad(&e.to_string()))? {
                Value::String(s) => Ok(Keyed { id: None, text: s }),
                Value::Object(o) => {
                    let id = ID_FIELDS.iter().find_map(|k| o.get(*k)).map(|v| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    });
                    let text = TEXT_FIELDS
                        .iter()
                        .find_map(|k| o.get(*k).and_then(Value::as_str))
                        .ok_or_else(|| bad("no text field"))?;
                    Ok(Keyed { id, text: text.into() })
                }
                _ => Err(bad("expected a string or an object")),
            }
        })
        .collect()
}

/// Pair predictions with references by id when every record has one,
/// otherwise by position.
pub fn align(preds: Vec<Keyed>, refs: Vec<Keyed>) -> Result<Vec<(String, String)>, MetricsError> {
    let all_ids = preds.iter().chain(&refs).all(|k| k.id.is_some());
    if !all_ids {
        if preds.len() != refs.len() {
            return Err(MetricsError::LengthMismatch {
                preds: preds.len(),
                refs: refs.len(),
            });
        }
        return Ok(preds.into_iter().zip(refs).map(|(p, r)| (p.text, r.text)).collect());
    }
    let by_id: std::collections::HashMap<String, String> =
        refs.into_iter().map(|r| (r.id.unwrap(), r.text)).collect();
    preds
        .into_iter()
        .map(|p| {
            let id = p.id.unwrap();
            by_id
                .get(&id)
                .map(|r| (p.text, r.clone()))
                .ok_or_else(|| MetricsError::Input(format!("no reference for id {id}")))
        })
        .collect()
}
