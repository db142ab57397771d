//! Distractor synthesis and four-option item assembly.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{ChatPrompt, Client, SamplingParams};
use crate::extract::first_json_object;
use crate::generation::QAPair;
use crate::ingest::Segment;
use crate::ledger::LedgerEvent;
use crate::normalize::normalize_span;
use crate::prompts::{self, APPRAISAL, DISTRACTORS, REPLACEMENT};

pub const N_OPTIONS: usize = 4;
pub const N_DISTRACTORS: usize = N_OPTIONS - 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    pub qa_id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    pub nuanced_index: usize,
    pub rng_seed_used: u64,
}

impl MCQItem {
    pub fn check(&self) -> Result<(), String> {
        if self.options.len() != N_OPTIONS {
            return Err(format!("{} options", self.options.len()));
        }
        if self.correct_index >= N_OPTIONS || self.nuanced_index >= N_OPTIONS {
            return Err("option index out of range".into());
        }
        if self.nuanced_index == self.correct_index {
            return Err("nuanced distractor is the correct option".into());
        }
        if !pairwise_distinct(self.options.iter().map(String::as_str)) {
            return Err("options not pairwise distinct".into());
        }
        Ok(())
    }

    pub fn answer(&self) -> &str {
        &self.options[self.correct_index]
    }
}

fn pairwise_distinct<'a>(items: impl Iterator<Item = &'a str>) -> bool {
    let mut seen = std::collections::HashSet::new();
    items.map(normalize_span).all(|k| !k.is_empty() && seen.insert(k))
}

/// Three distractors, one flagged as the subtle-shift ("nuanced") option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorSet {
    pub distractors: Vec<String>,
    pub nuanced_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Acceptable,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppraisedDistractor {
    pub text: String,
    pub verdict: Verdict,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorAppraisal {
    pub qa_id: String,
    pub per_distractor: Vec<AppraisedDistractor>,
}

impl DistractorAppraisal {
    pub fn all_acceptable(&self) -> bool {
        self.per_distractor.iter().all(|d| d.verdict == Verdict::Acceptable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Re-prompts after an unusable distractor reply.
    pub retries: u32,
    pub appraisal: bool,
    pub appraisal_retries: u32,
    /// Appraise-and-replace rounds before giving up on an item.
    pub replacement_rounds: u32,
}

impl Default for DistractorSettings {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_output_tokens: 512,
            retries: 2,
            appraisal: true,
            appraisal_retries: 1,
            replacement_rounds: 2,
        }
    }
}

impl DistractorSettings {
    fn sampling(&self, temperature: f64) -> SamplingParams {
        SamplingParams {
            temperature,
            max_output_tokens: self.max_output_tokens,
            stop_sequences: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CounterfactualError {
    #[error("no acceptable distractors for {qa_id}: {reason}")]
    Exhausted { qa_id: String, reason: String },
    #[error("duplicate options for {qa_id}")]
    DuplicateOptions { qa_id: String },
    #[error("expected {N_DISTRACTORS} distractors, got {0}")]
    Cardinality(usize),
    #[error("pair {qa_id} refers to unknown segment {segment_id}")]
    UnknownSegment { qa_id: String, segment_id: String },
}

/// Check a distractor reply against the answer. The error text is fed back to
/// the model as a correction.
pub fn parse_distractors(raw: &str, answer: &str) -> Result<DistractorSet, String> {
    let obj = first_json_object(raw).ok_or("no JSON object in reply")?;
    let list = obj
        .get("distractors")
        .and_then(Value::as_array)
        .ok_or("missing \"distractors\" array")?;
    if list.len() != N_DISTRACTORS {
        return Err(format!("expected exactly {N_DISTRACTORS} distractors, got {}", list.len()));
    }
    let distractors: Vec<String> = list
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()))
        .collect::<Option<_>>()
        .ok_or("every distractor must be a non-empty string")?;
    let answer_key = normalize_span(answer);
    if distractors.iter().any(|d| normalize_span(d) == answer_key) {
        return Err("a distractor repeats the correct answer".into());
    }
    if !pairwise_distinct(distractors.iter().map(String::as_str)) {
        return Err("the distractors must differ from each other".into());
    }
    let nuanced_index = obj
        .get("nuanced_index")
        .and_then(Value::as_u64)
        .map(|n| n as usize)
        .filter(|&n| n < N_DISTRACTORS)
        .ok_or("\"nuanced_index\" must be 0, 1 or 2")?;
    Ok(DistractorSet {
        distractors,
        nuanced_index,
    })
}

pub fn build_distractor_prompt(qa: &QAPair, segment: &Segment, extra: &str, settings: &DistractorSettings) -> ChatPrompt {
    let user = DISTRACTORS.render_user(&[
        ("extra", extra),
        ("pair", &prompts::pair_json(qa)),
        ("passage", &segment.text),
    ]);
    ChatPrompt::new(DISTRACTORS.system(), user, settings.sampling(settings.temperature)).with_template(DISTRACTORS.id)
}

pub fn generate_distractors(
    qa: &QAPair,
    segment: &Segment,
    settings: &DistractorSettings,
    client: &Client,
) -> Result<DistractorSet, CounterfactualError> {
    let mut reason = String::new();
    for _ in 0..=settings.retries {
        let extra = if reason.is_empty() {
            String::new()
        } else {
            format!("- Your previous reply could not be used: {reason}. Follow the rules above exactly.\n")
        };
        let prompt = build_distractor_prompt(qa, segment, &extra, settings);
        let outcome = client
            .complete(&prompt)
            .map_err(|e| format!("backend: {e}"))
            .and_then(|raw| parse_distractors(&raw, &qa.answer));
        match outcome {
            Ok(set) => return Ok(set),
            Err(r) => {
                client.ledger().record(LedgerEvent::DistractorRetry {
                    qa_id: qa.qa_id.clone(),
                    reason: r.clone(),
                });
                reason = r;
            }
        }
    }
    Err(exhausted(qa, client, reason))
}

fn exhausted(qa: &QAPair, client: &Client, reason: String) -> CounterfactualError {
    client.ledger().record(LedgerEvent::DistractorExhausted {
        qa_id: qa.qa_id.clone(),
        reason: reason.clone(),
    });
    CounterfactualError::Exhausted {
        qa_id: qa.qa_id.clone(),
        reason,
    }
}

fn parse_appraisal(raw: &str, set: &DistractorSet) -> Option<Vec<(Verdict, String)>> {
    let list = first_json_object(raw)?.get("appraisals")?.as_array()?.clone();
    if list.len() != set.distractors.len() {
        return None;
    }
    list.iter()
        .map(|e| {
            let verdict = match e.get("verdict")?.as_str()?.trim().to_ascii_lowercase().as_str() {
                "acceptable" => Verdict::Acceptable,
                "regenerate" => Verdict::Regenerate,
                _ => return None,
            };
            Some((verdict, e.get("reason").and_then(Value::as_str).unwrap_or("").to_string()))
        })
        .collect()
}

/// One verdict per distractor. With appraisal disabled everything is
/// acceptable; an unusable appraisal reply marks everything for regeneration.
pub fn appraise_distractors(
    qa: &QAPair,
    set: &DistractorSet,
    segment: &Segment,
    settings: &DistractorSettings,
    client: &Client,
) -> DistractorAppraisal {
    let verdicts = if settings.appraisal {
        let user = APPRAISAL.render_user(&[
            ("pair", &prompts::pair_json(qa)),
            ("distractors", &json!(set.distractors).to_string()),
            ("passage", &segment.text),
        ]);
        let prompt = ChatPrompt::new(APPRAISAL.system(), user, settings.sampling(0.0)).with_template(APPRAISAL.id);
        (0..=settings.appraisal_retries)
            .find_map(|_| client.complete(&prompt).ok().and_then(|raw| parse_appraisal(&raw, set)))
            .unwrap_or_else(|| vec![(Verdict::Regenerate, "appraisal unparseable".to_string()); set.distractors.len()])
    } else {
        vec![(Verdict::Acceptable, "appraisal disabled".to_string()); set.distractors.len()]
    };
    DistractorAppraisal {
        qa_id: qa.qa_id.clone(),
        per_distractor: set
            .distractors
            .iter()
            .zip(verdicts)
            .map(|(text, (verdict, reason))| AppraisedDistractor {
                text: text.clone(),
                verdict,
                reason,
            })
            .collect(),
    }
}

fn replace_one(
    qa: &QAPair,
    set: &DistractorSet,
    slot: usize,
    reason: &str,
    segment: &Segment,
    settings: &DistractorSettings,
    client: &Client,
) -> Option<String> {
    let others: Vec<&String> = set.distractors.iter().enumerate().filter(|(i, _)| *i != slot).map(|(_, d)| d).collect();
    let nuance = if slot == set.nuanced_index {
        "The rejected option was the one differing from the correct answer only by a subtle semantic shift; the new one must do the same.\n"
    } else {
        ""
    };
    let user = REPLACEMENT.render_user(&[
        ("rejected", &json!(set.distractors[slot]).to_string()),
        ("reason", reason),
        ("keep", &json!(others).to_string()),
        ("nuance", nuance),
        ("pair", &prompts::pair_json(qa)),
        ("passage", &segment.text),
    ]);
    let prompt =
        ChatPrompt::new(REPLACEMENT.system(), user, settings.sampling(settings.temperature)).with_template(REPLACEMENT.id);
    let raw = client.complete(&prompt).ok()?;
    let new = first_json_object(&raw)?.get("distractor")?.as_str()?.trim().to_string();
    let mut taken: Vec<&str> = others.iter().map(|s| s.as_str()).collect();
    taken.push(&qa.answer);
    taken.push(&new);
    pairwise_distinct(taken.into_iter()).then_some(new)
}

/// Generate, appraise and repair a distractor set. Rejected distractors are
/// replaced one call each; an item still failing after the round budget is
/// exhausted.
pub fn counterfactuals_for(
    qa: &QAPair,
    segment: &Segment,
    settings: &DistractorSettings,
    client: &Client,
) -> Result<(DistractorSet, DistractorAppraisal), CounterfactualError> {
    let mut set = generate_distractors(qa, segment, settings, client)?;
    let mut round = 0;
    loop {
        let appraisal = appraise_distractors(qa, &set, segment, settings, client);
        if appraisal.all_acceptable() {
            return Ok((set, appraisal));
        }
        if round == settings.replacement_rounds {
            let n = appraisal.per_distractor.iter().filter(|d| d.verdict == Verdict::Regenerate).count();
            return Err(exhausted(qa, client, format!("{n} distractor(s) still rejected after {round} rounds")));
        }
        round += 1;
        for (slot, d) in appraisal.per_distractor.iter().enumerate() {
            if d.verdict == Verdict::Acceptable {
                continue;
            }
            match replace_one(qa, &set, slot, &d.reason, segment, settings, client) {
                Some(new) => set.distractors[slot] = new,
                None => client.ledger().record(LedgerEvent::DistractorRetry {
                    qa_id: qa.qa_id.clone(),
                    reason: format!("replacement for option {slot} unusable"),
                }),
            }
        }
    }
}

/// Seed of the per-item generator: first 8 bytes of SHA-256(run_seed || qa_id).
pub fn item_seed(run_seed: u64, qa_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(qa_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn correct_position(run_seed: u64, qa_id: &str) -> usize {
    ChaCha8Rng::seed_from_u64(item_seed(run_seed, qa_id)).gen_range(0..N_OPTIONS)
}

/// Place the answer at its seeded position; distractors fill the other slots
/// in order.
pub fn assemble_mcq(qa: &QAPair, set: &DistractorSet, run_seed: u64) -> Result<MCQItem, CounterfactualError> {
    if set.distractors.len() != N_DISTRACTORS {
        return Err(CounterfactualError::Cardinality(set.distractors.len()));
    }
    let mut all = vec![qa.answer.as_str()];
    all.extend(set.distractors.iter().map(String::as_str));
    if !pairwise_distinct(all.into_iter()) || set.nuanced_index >= N_DISTRACTORS {
        return Err(CounterfactualError::DuplicateOptions { qa_id: qa.qa_id.clone() });
    }
    let correct_index = correct_position(run_seed, &qa.qa_id);
    let mut options = set.distractors.clone();
    options.insert(correct_index, qa.answer.clone());
    let nuanced_index = if set.nuanced_index < correct_index {
        set.nuanced_index
    } else {
        set.nuanced_index + 1
    };
    Ok(MCQItem {
        qa_id: qa.qa_id.clone(),
        stem: qa.question.clone(),
        options,
        correct_index,
        nuanced_index,
        rng_seed_used: run_seed,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Stage3Output {
    pub items: Vec<MCQItem>,
    pub appraisals: Vec<DistractorAppraisal>,
    /// Pairs without an acceptable distractor set, exported in QA form only.
    pub qa_only: Vec<QAPair>,
}

pub fn run_counterfactuals(
    segments: &[Segment],
    pairs: &[QAPair],
    settings: &DistractorSettings,
    run_seed: u64,
    client: &Client,
) -> Result<Stage3Output, CounterfactualError> {
    let by_id: HashMap<&str, &Segment> = segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    let mut work = Vec::with_capacity(pairs.len());
    for qa in pairs {
        let seg = by_id.get(qa.segment_id.as_str()).ok_or_else(|| CounterfactualError::UnknownSegment {
            qa_id: qa.qa_id.clone(),
            segment_id: qa.segment_id.clone(),
        })?;
        work.push((qa, *seg));
    }
    let results = client.fan_out(&work, |(qa, seg)| {
        counterfactuals_for(qa, seg, settings, client).and_then(|(set, appraisal)| {
            assemble_mcq(qa, &set, run_seed).map(|item| (item, appraisal))
        })
    });
    let mut out = Stage3Output::default();
    for ((qa, _), r) in work.iter().zip(results) {
        match r {
            Ok((item, appraisal)) => {
                out.items.push(item);
                out.appraisals.push(appraisal);
            }
            Err(CounterfactualError::Exhausted { .. } | CounterfactualError::DuplicateOptions { .. }) => {
                out.qa_only.push((*qa).clone())
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, BackendError, ChatBackend, Completion, MockBackend, RetryPolicy};
    use crate::generation::{Provenance, QType};
    use crate::ledger::Ledger;
    use crate::prompts::Task;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    const TEXT: &str = "The bridge opened in 1932 after six years of work. It carries eight lanes of traffic.";

    fn seg() -> Segment {
        Segment {
            segment_id: "b#0".into(),
            doc_id: "b".into(),
            index: 0,
            text: TEXT.into(),
            token_count: crate::ingest::count_tokens(TEXT),
        }
    }

    fn qa(id: &str) -> QAPair {
        QAPair {
            qa_id: id.into(),
            segment_id: "b#0".into(),
            question: "When did the bridge open?".into(),
            answer: "1932".into(),
            qtype: QType::Explicit,
            reasoning: None,
            provenance: Provenance::Generated,
        }
    }

    fn set(d: [&str; 3], nuanced: usize) -> DistractorSet {
        DistractorSet {
            distractors: d.iter().map(|s| s.to_string()).collect(),
            nuanced_index: nuanced,
        }
    }

    /// Per-task scripted replies; `None` defers to the generative mock.
    struct Scripted<F> {
        f: F,
        calls: Arc<Vec<AtomicUsize>>,
    }

    fn task_slot(t: Task) -> usize {
        t as usize
    }

    impl<F: Fn(Task, usize, &str) -> Option<String> + Send + Sync> ChatBackend for Scripted<F> {
        fn complete(&self, p: &ChatPrompt) -> Result<Completion, BackendError> {
            let task = Task::detect(&p.user).unwrap();
            let n = self.calls[task_slot(task)].fetch_add(1, Ordering::SeqCst);
            match (self.f)(task, n, &p.user) {
                Some(r) => Ok(Completion::text(r)),
                None => MockBackend::generative(0).complete(p),
            }
        }
    }

    fn scripted<F: Fn(Task, usize, &str) -> Option<String> + Send + Sync + 'static>(f: F) -> (Client, Arc<Vec<AtomicUsize>>) {
        let calls = Arc::new((0..8).map(|_| AtomicUsize::new(0)).collect::<Vec<_>>());
        let cfg = BackendConfig {
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_base: Duration::from_millis(1),
            },
            ..BackendConfig::default()
        };
        let be = Scripted { f, calls: calls.clone() };
        (Client::new(Arc::new(be), cfg, Arc::new(Ledger::new())), calls)
    }

    fn calls(c: &[AtomicUsize], t: Task) -> usize {
        c[task_slot(t)].load(Ordering::SeqCst)
    }

    #[test]
    fn happy_path_accepts_three() {
        let (c, n) = scripted(|t, _, _| {
            (t == Task::DistractorGeneration).then(|| r#"{"distractors": ["1931", "1923", "1942"], "nuanced_index": 0}"#.into())
        });
        let (s, appraisal) = counterfactuals_for(&qa("b#0:q0"), &seg(), &DistractorSettings::default(), &c).unwrap();
        assert_eq!(s, set(["1931", "1923", "1942"], 0));
        assert!(appraisal.all_acceptable());
        assert_eq!(appraisal.per_distractor.len(), 3);
        assert_eq!(calls(&n, Task::DistractorGeneration), 1);
        assert_eq!(calls(&n, Task::DistractorReplacement), 0);
    }

    #[test]
    fn distractor_equal_to_answer_is_retried() {
        let (c, n) = scripted(|t, k, _| match (t, k) {
            (Task::DistractorGeneration, 0) => Some(r#"{"distractors": ["1932.", "1923", "1942"], "nuanced_index": 1}"#.into()),
            (Task::DistractorGeneration, _) => Some(r#"{"distractors": ["1931", "1923", "1942"], "nuanced_index": 1}"#.into()),
            _ => None,
        });
        let s = generate_distractors(&qa("b#0:q0"), &seg(), &DistractorSettings::default(), &c).unwrap();
        assert_eq!(s.distractors[0], "1931");
        assert_eq!(calls(&n, Task::DistractorGeneration), 2);
        assert_eq!(c.ledger().count("distractor_retry"), 1);
    }

    #[test]
    fn corrective_note_reaches_prompt() {
        let p = build_distractor_prompt(&qa("x"), &seg(), "- fix it\n", &DistractorSettings::default());
        assert!(p.user.contains("- fix it"));
        assert!(p.user.contains("nuanced_index"));
    }

    #[test]
    fn two_strings_exhaust() {
        let (c, n) = scripted(|t, _, _| (t == Task::DistractorGeneration).then(|| r#"{"distractors": ["a", "b"], "nuanced_index": 0}"#.into()));
        let err = generate_distractors(&qa("b#0:q0"), &seg(), &DistractorSettings::default(), &c).unwrap_err();
        assert!(matches!(err, CounterfactualError::Exhausted { .. }));
        assert_eq!(calls(&n, Task::DistractorGeneration), 3);
        assert_eq!(c.ledger().count("distractor_exhausted"), 1);
    }

    #[test]
    fn parse_rules() {
        assert!(parse_distractors(r#"{"distractors": ["a", "A ", "b"], "nuanced_index": 0}"#, "x").is_err());
        assert!(parse_distractors(r#"{"distractors": ["a", "b", "c"], "nuanced_index": 3}"#, "x").is_err());
        assert!(parse_distractors(r#"{"distractors": ["a", "b", "c"]}"#, "x").is_err());
        assert!(parse_distractors(r#"{"distractors": ["a", "", "c"], "nuanced_index": 0}"#, "x").is_err());
        assert!(parse_distractors("three options: a, b, c", "x").is_err());
        assert_eq!(
            parse_distractors(r#"{"distractors": ["a", "b", "c"], "nuanced_index": 2}"#, "x").unwrap(),
            set(["a", "b", "c"], 2)
        );
    }

    #[test]
    fn one_regenerate_means_one_replacement() {
        let (c, n) = scripted(|t, k, _| match (t, k) {
            (Task::DistractorAppraisal, 0) => Some(
                r#"{"appraisals": [{"verdict": "acceptable", "reason": ""}, {"verdict": "regenerate", "reason": "off topic"}, {"verdict": "acceptable", "reason": ""}]}"#
                    .into(),
            ),
            _ => None,
        });
        let (s, appraisal) = counterfactuals_for(&qa("b#0:q0"), &seg(), &DistractorSettings::default(), &c).unwrap();
        assert!(appraisal.all_acceptable());
        assert_eq!(calls(&n, Task::DistractorReplacement), 1);
        assert_eq!(calls(&n, Task::DistractorAppraisal), 2);
        let item = assemble_mcq(&qa("b#0:q0"), &s, 1).unwrap();
        item.check().unwrap();
    }

    #[test]
    fn persistent_regenerate_exhausts() {
        let all_bad = r#"{"appraisals": [{"verdict": "regenerate", "reason": "weak"}, {"verdict": "regenerate", "reason": "weak"}, {"verdict": "regenerate", "reason": "weak"}]}"#;
        let (c, n) = scripted(move |t, _, _| (t == Task::DistractorAppraisal).then(|| all_bad.to_string()));
        let settings = DistractorSettings::default();
        let err = counterfactuals_for(&qa("b#0:q0"), &seg(), &settings, &c).unwrap_err();
        assert!(matches!(err, CounterfactualError::Exhausted { .. }));
        assert_eq!(calls(&n, Task::DistractorReplacement), 3 * settings.replacement_rounds as usize);
        assert_eq!(calls(&n, Task::DistractorAppraisal), settings.replacement_rounds as usize + 1);
    }

    #[test]
    fn unparseable_appraisal_means_regenerate() {
        let (c, _) = scripted(|t, _, _| (t == Task::DistractorAppraisal).then(|| "looks good to me".into()));
        let s = set(["a", "b", "c"], 0);
        let a = appraise_distractors(&qa("b#0:q0"), &s, &seg(), &DistractorSettings::default(), &c);
        assert!(a.per_distractor.iter().all(|d| d.verdict == Verdict::Regenerate));

        let off = DistractorSettings {
            appraisal: false,
            ..DistractorSettings::default()
        };
        let a = appraise_distractors(&qa("b#0:q0"), &s, &seg(), &off, &c);
        assert!(a.all_acceptable());
        assert_eq!(a.per_distractor[2].text, "c");
    }

    #[test]
    fn assemble_places_answer_once() {
        let q = qa("b#0:q7");
        let item = assemble_mcq(&q, &set(["1931", "1923", "1942"], 1), 7).unwrap();
        item.check().unwrap();
        assert_eq!(item.answer(), "1932");
        assert_eq!(item.options.iter().filter(|o| *o == "1932").count(), 1);
        assert_eq!(item.options[item.nuanced_index], "1923");
        let rest: Vec<&String> = item.options.iter().filter(|o| *o != "1932").collect();
        assert_eq!(rest, ["1931", "1923", "1942"]);
        assert_eq!(item, assemble_mcq(&q, &set(["1931", "1923", "1942"], 1), 7).unwrap());
    }

    #[test]
    fn assemble_rejects_duplicates() {
        let err = assemble_mcq(&qa("x"), &set(["1931", "1932", "1942"], 0), 7).unwrap_err();
        assert_eq!(err, CounterfactualError::DuplicateOptions { qa_id: "x".into() });
        assert!(matches!(
            assemble_mcq(&qa("x"), &DistractorSet { distractors: vec!["a".into()], nuanced_index: 0 }, 7),
            Err(CounterfactualError::Cardinality(1))
        ));
    }

    #[test]
    fn position_depends_on_seed_and_id() {
        let a: Vec<usize> = (0..64).map(|i| correct_position(7, &format!("q{i}"))).collect();
        let b: Vec<usize> = (0..64).map(|i| correct_position(8, &format!("q{i}"))).collect();
        assert_ne!(a, b);
        assert_eq!(a, (0..64).map(|i| correct_position(7, &format!("q{i}"))).collect::<Vec<_>>());
    }

    #[test]
    fn hundred_thousand_positions_are_uniform() {
        let n = 100_000;
        let mut counts = [0u64; 4];
        for i in 0..n {
            counts[correct_position(7, &format!("doc{}#{}:q{}", i / 60, (i / 6) % 10, i % 6))] += 1;
        }
        let expected = n as f64 / 4.0;
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.2425..=0.2575).contains(&f), "{counts:?}");
        }
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2={stat} p={p}");
    }

    #[test]
    fn stage_routes_failures_to_qa_only() {
        let (c, _) = scripted(|t, _, user| (t == Task::DistractorGeneration && user.contains("b#0:q1")).then(|| "nope".into()));
        let pairs = vec![qa("b#0:q0"), qa("b#0:q1"), qa("b#0:q2")];
        let out = run_counterfactuals(&[seg()], &pairs, &DistractorSettings::default(), 7, &c).unwrap();
        let ids: Vec<&str> = out.items.iter().map(|i| i.qa_id.as_str()).collect();
        assert_eq!(ids, ["b#0:q0", "b#0:q2"]);
        assert_eq!(out.qa_only, vec![qa("b#0:q1")]);
        assert_eq!(out.appraisals.len(), 2);
        for item in &out.items {
            item.check().unwrap();
        }

        let mut orphan = qa("z");
        orphan.segment_id = "nowhere#0".into();
        assert!(matches!(
            run_counterfactuals(&[seg()], &[orphan], &DistractorSettings::default(), 7, &c),
            Err(CounterfactualError::UnknownSegment { .. })
        ));
    }
}
