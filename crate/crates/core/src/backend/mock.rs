//! Deterministic mock backend.
//!
//! Two modes:
//! - scripted: replies looked up by [`ChatPrompt::hash`], with an optional
//!   catch-all reply;
//! - generative: well-formed stage outputs synthesized from the prompt's task
//!   line and `<passage>`/`<pair>` blocks. Output is a pure function of the
//!   prompt text and the seed.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatPrompt, Completion, Usage};
use crate::ingest::{count_tokens, tokenize};
use crate::normalize::normalize_span;
use crate::prompts::{block, Task};

#[derive(Debug, Clone)]
enum Mode {
    Scripted {
        replies: HashMap<String, String>,
        fallback: Option<String>,
    },
    Generative {
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    mode: Mode,
}

impl MockBackend {
    pub fn generative(seed: u64) -> Self {
        Self {
            mode: Mode::Generative { seed },
        }
    }

    /// Replies keyed by prompt hash.
    pub fn scripted(replies: HashMap<String, String>) -> Self {
        Self {
            mode: Mode::Scripted {
                replies,
                fallback: None,
            },
        }
    }

    /// Replies with `reply` to every prompt.
    pub fn always(reply: impl Into<String>) -> Self {
        Self {
            mode: Mode::Scripted {
                replies: HashMap::new(),
                fallback: Some(reply.into()),
            },
        }
    }

    pub fn reply_for(&self, prompt: &ChatPrompt) -> Result<String, BackendError> {
        match &self.mode {
            Mode::Scripted { replies, fallback } => {
                let h = prompt.hash();
                replies
                    .get(&h)
                    .or(fallback.as_ref())
                    .cloned()
                    .ok_or(BackendError::NoScriptedReply { hash: h })
            }
            Mode::Generative { seed } => Ok(generate(prompt, *seed)),
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, prompt: &ChatPrompt) -> Result<Completion, BackendError> {
        let text = self.reply_for(prompt)?;
        let usage = Usage {
            prompt_tokens: (count_tokens(&prompt.system) + count_tokens(&prompt.user)) as u64,
            completion_tokens: count_tokens(&text) as u64,
        };
        Ok(Completion {
            text,
            usage: Some(usage),
        })
    }
}

/// Load a scripted-reply fixture: either a JSON object mapping prompt hash to
/// reply, or JSONL lines of `{"prompt_hash": ..., "reply": ...}`.
pub fn load_script(path: &Path) -> std::io::Result<HashMap<String, String>> {
    let raw = fs::read_to_string(path)?;
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    if let Ok(map) = serde_json::from_str::<HashMap<String, String>>(&raw) {
        return Ok(map);
    }
    let mut out = HashMap::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| invalid(format!("line {}: {e}", i + 1)))?;
        let (Some(h), Some(r)) = (v["prompt_hash"].as_str(), v["reply"].as_str()) else {
            return Err(invalid(format!("line {}: expected prompt_hash and reply", i + 1)));
        };
        out.insert(h.to_string(), r.to_string());
    }
    Ok(out)
}

fn rotation(prompt: &ChatPrompt, seed: u64) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.hash().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) as usize
}

fn generate(prompt: &ChatPrompt, seed: u64) -> String {
    let user = prompt.user.as_str();
    let r = rotation(prompt, seed);
    let passage = block(user, "passage").unwrap_or("");
    let pair: Value = block(user, "pair")
        .and_then(|p| serde_json::from_str(p).ok())
        .unwrap_or(Value::Null);
    match Task::detect(user) {
        Some(Task::QaGeneration) => gen_pairs(user, passage, r),
        Some(Task::QaAdjudication) => adjudicate(&pair, passage),
        Some(Task::ReasoningBackfill) => json!({
            "reasoning": format!(
                "The passage discusses this directly. Combining its statements leads to the conclusion: {}.",
                pair["answer"].as_str().unwrap_or("")
            )
        })
        .to_string(),
        Some(Task::DistractorGeneration) => distractors(&pair, passage, r),
        Some(Task::DistractorAppraisal) => {
            let n = block(user, "distractors")
                .and_then(|d| serde_json::from_str::<Vec<Value>>(d).ok())
                .map_or(3, |d| d.len());
            let items: Vec<Value> = (0..n)
                .map(|_| json!({"verdict": "acceptable", "reason": "plausible and distinguishable"}))
                .collect();
            json!({ "appraisals": items }).to_string()
        }
        Some(Task::DistractorReplacement) => replacement(user, &pair, passage, r),
        Some(Task::RecordRepair) => json!({"unrepairable": true}).to_string(),
        None => "I'm not sure how to help with that.".to_string(),
    }
}

/// Distinct passage words (letters only, length >= 3), first occurrence order.
fn passage_words(passage: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<String> = tokenize(passage)
        .into_iter()
        .filter(|t| t.chars().count() >= 3 && t.chars().all(char::is_alphabetic))
        .filter(|t| seen.insert(t.to_lowercase()))
        .map(String::from)
        .collect();
    if out.is_empty() {
        out = tokenize(passage)
            .into_iter()
            .filter(|t| t.chars().any(char::is_alphanumeric))
            .filter(|t| seen.insert(t.to_lowercase()))
            .map(String::from)
            .collect();
    }
    out
}

fn count_directive(user: &str, kind: &str) -> usize {
    let re = Regex::new(&format!(r"Write exactly (\d+) {kind}")).unwrap();
    re.captures(user).and_then(|c| c[1].parse().ok()).unwrap_or(0)
}

fn sentence_opening(passage: &str, word: &str) -> String {
    let sentence = passage
        .split_inclusive(['.', '!', '?'])
        .find(|s| s.contains(word))
        .unwrap_or(passage);
    sentence.split_whitespace().take(4).collect::<Vec<_>>().join(" ")
}

fn gen_pairs(user: &str, passage: &str, r: usize) -> String {
    let n_explicit = count_directive(user, "explicit");
    let n_implicit = count_directive(user, "implicit");
    let words = passage_words(passage);
    let mut items = Vec::new();
    if words.is_empty() {
        return "[]".into();
    }
    let pick = |k: usize| words[(r + k) % words.len()].clone();
    for i in 0..n_explicit {
        let w = pick(i);
        items.push(json!({
            "question": format!(
                "Which {}-letter term appears in the sentence that begins \"{}\"?",
                w.chars().count(),
                sentence_opening(passage, &w)
            ),
            "answer": w,
            "type": "explicit",
            "reasoning": null,
        }));
    }
    for i in 0..n_implicit {
        let a = pick(n_explicit + 2 * i);
        let b = pick(n_explicit + 2 * i + 1);
        items.push(json!({
            "question": format!("How does the passage connect {a} and {b}?"),
            "answer": format!("{a} is tied to {b}"),
            "type": "implicit",
            "reasoning": format!(
                "The passage mentions \"{a}\". It also mentions \"{b}\". Reading the two statements together, {a} is tied to {b}."
            ),
        }));
    }
    format!(
        "Here are the question-answer pairs:\n```json\n{}\n```",
        serde_json::to_string_pretty(&Value::Array(items)).unwrap()
    )
}

fn adjudicate(pair: &Value, passage: &str) -> String {
    let answer = pair["answer"].as_str().unwrap_or("");
    let qtype = pair["type"].as_str().unwrap_or("");
    let reasoning = pair["reasoning"].as_str().unwrap_or("");
    let grounded = !answer.is_empty() && normalize_span(passage).contains(&normalize_span(answer));
    let (directive, corrected, rationale) = match qtype {
        "explicit" if grounded => ("KEEP", None, "answer is stated in the passage"),
        "explicit" => ("DELETE", None, "answer is not supported by the passage"),
        "implicit" if reasoning.trim().is_empty() => ("DELETE", None, "no reasoning offered for the inference"),
        "implicit" if !answer.is_empty() && passage.contains(answer) => {
            ("TYPEFIX", Some("explicit"), "answer can be copied verbatim from the passage")
        }
        "implicit" => ("KEEP", None, "answer requires combining statements"),
        _ => ("DELETE", None, "unknown question type"),
    };
    json!({"directive": directive, "corrected_type": corrected, "rationale": rationale}).to_string()
}

fn variants(answer: &str, passage: &str, r: usize, exclude: &[String]) -> Vec<String> {
    let words = passage_words(passage);
    let mut taken: Vec<String> = exclude.iter().map(|s| normalize_span(s)).collect();
    taken.push(normalize_span(answer));
    let answer_words: Vec<&str> = answer.split_whitespace().collect();
    let mut out = Vec::new();
    let n = words.len().max(1);
    for k in 0..words.len() {
        let cand = &words[(r + k) % n];
        if answer_words.iter().any(|w| w.eq_ignore_ascii_case(cand)) {
            continue;
        }
        let option = match answer_words.split_last() {
            Some((_, head)) if !head.is_empty() => format!("{} {}", head.join(" "), cand),
            _ => cand.clone(),
        };
        let key = normalize_span(&option);
        if !taken.contains(&key) {
            taken.push(key);
            out.push(option);
        }
    }
    let mut extra = 1;
    while out.len() < 3 {
        let option = format!("{answer} (alternative {extra})");
        extra += 1;
        let key = normalize_span(&option);
        if !taken.contains(&key) {
            taken.push(key);
            out.push(option);
        }
    }
    out
}

fn distractors(pair: &Value, passage: &str, r: usize) -> String {
    let answer = pair["answer"].as_str().unwrap_or("");
    let options: Vec<String> = variants(answer, passage, r, &[]).into_iter().take(3).collect();
    json!({"distractors": options, "nuanced_index": 0}).to_string()
}

fn replacement(user: &str, pair: &Value, passage: &str, r: usize) -> String {
    let answer = pair["answer"].as_str().unwrap_or("");
    let mut exclude: Vec<String> = user
        .lines()
        .find_map(|l| l.strip_prefix("The new distractor must differ from the correct answer and from these options: "))
        .and_then(|l| serde_json::from_str(l).ok())
        .unwrap_or_default();
    if let Some(rej) = user
        .lines()
        .find_map(|l| l.strip_prefix("Rejected distractor: "))
        .and_then(|l| serde_json::from_str::<String>(l).ok())
    {
        exclude.push(rej);
    }
    let option = variants(answer, passage, r, &exclude).remove(0);
    json!({ "distractor": option }).to_string()
}
