//! Quality control of generated pairs.
//!
//! Each pair first gets a deterministic grounding check (is an explicit
//! answer present in the segment?) whose result is passed to the LLM
//! adjudicator as advice. The adjudicator answers KEEP, DELETE or TYPEFIX.
//! Unresolvable adjudications fail closed (DELETE). After verdicts are
//! applied, every segment must still hold at least one explicit pair; if not,
//! a single new explicit pair is generated and adjudicated.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ChatPrompt, Client, SamplingParams};
use crate::extract::first_json_object;
use crate::generation::{self, GenerationSettings, GenerationSpec, Provenance, QAPair, QType};
use crate::ingest::Segment;
use crate::ledger::LedgerEvent;
use crate::normalize::{folded_with_offsets, normalize_span};
use crate::prompts::{self, ADJUDICATION, BACKFILL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    ExactSubstring,
    NormalizedSubstring,
    NotFound,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub qa_id: String,
    pub answer_found: bool,
    pub match_kind: MatchKind,
    /// Character offsets `(start, end)` into the segment text.
    pub matched_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Directive {
    #[serde(rename = "KEEP")]
    Keep,
    #[serde(rename = "DELETE")]
    Delete,
    #[serde(rename = "TYPEFIX")]
    TypeFix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QCVerdict {
    pub qa_id: String,
    pub directive: Directive,
    pub corrected_qtype: Option<QType>,
    pub rationale: String,
}

impl QCVerdict {
    pub fn keep(qa_id: &str) -> Self {
        Self::new(qa_id, Directive::Keep, None, "")
    }

    pub fn delete(qa_id: &str, rationale: &str) -> Self {
        Self::new(qa_id, Directive::Delete, None, rationale)
    }

    pub fn typefix(qa_id: &str, to: QType) -> Self {
        Self::new(qa_id, Directive::TypeFix, Some(to), "")
    }

    fn new(qa_id: &str, directive: Directive, corrected_qtype: Option<QType>, rationale: &str) -> Self {
        Self {
            qa_id: qa_id.into(),
            directive,
            corrected_qtype,
            rationale: rationale.into(),
        }
    }

    /// TYPEFIX must carry a type different from the original; KEEP and DELETE
    /// carry none.
    pub fn check(&self, original: QType) -> Result<(), String> {
        match (self.directive, self.corrected_qtype) {
            (Directive::TypeFix, Some(t)) if t != original => Ok(()),
            (Directive::TypeFix, Some(_)) => Err("TYPEFIX to the same type".into()),
            (Directive::TypeFix, None) => Err("TYPEFIX without corrected type".into()),
            (_, None) => Ok(()),
            (_, Some(_)) => Err("corrected type given without TYPEFIX".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Re-asks after an unparseable adjudication before failing closed.
    pub retries: u32,
    /// Regeneration attempts beyond the first when the explicit floor fails.
    pub floor_retries: u32,
    pub backfill_retries: u32,
}

impl Default for QcSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
            retries: 2,
            floor_retries: 2,
            backfill_retries: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QcError {
    #[error("pair {qa_id} belongs to {pair_segment}, not segment {segment_id}")]
    SegmentMismatch {
        qa_id: String,
        pair_segment: String,
        segment_id: String,
    },
    #[error("verdicts do not match pairs: {0}")]
    VerdictMismatch(String),
    #[error("segment {segment_id} has no validated explicit pair after {attempts} regeneration attempts")]
    FloorUnsatisfied { segment_id: String, attempts: u32 },
}

fn check_segment(qa: &QAPair, segment: &Segment) -> Result<(), QcError> {
    if qa.segment_id != segment.segment_id {
        return Err(QcError::SegmentMismatch {
            qa_id: qa.qa_id.clone(),
            pair_segment: qa.segment_id.clone(),
            segment_id: segment.segment_id.clone(),
        });
    }
    Ok(())
}

fn char_span(text: &str, start: usize, end: usize) -> (usize, usize) {
    (text[..start].chars().count(), text[..end].chars().count())
}

/// Search an explicit answer in the segment: verbatim first, then after
/// lowercasing, whitespace collapse and terminal punctuation stripping.
pub fn grounding_prefilter(qa: &QAPair, segment: &Segment) -> Result<GroundingReport, QcError> {
    check_segment(qa, segment)?;
    let report = |kind: MatchKind, span: Option<(usize, usize)>| GroundingReport {
        qa_id: qa.qa_id.clone(),
        answer_found: matches!(kind, MatchKind::ExactSubstring | MatchKind::NormalizedSubstring),
        match_kind: kind,
        matched_span: span,
    };
    if qa.qtype == QType::Implicit {
        return Ok(report(MatchKind::NotApplicable, None));
    }
    let text = &segment.text;
    let answer = qa.answer.trim();
    if !answer.is_empty() {
        if let Some(at) = text.find(answer) {
            return Ok(report(MatchKind::ExactSubstring, Some(char_span(text, at, at + answer.len()))));
        }
    }
    let needle = normalize_span(answer);
    if !needle.is_empty() {
        let (folded, map) = folded_with_offsets(text);
        if let Some(at) = folded.find(&needle) {
            let start = map[at];
            let last = map[at + needle.len() - 1];
            let end = last + text[last..].chars().next().map_or(0, char::len_utf8);
            return Ok(report(MatchKind::NormalizedSubstring, Some(char_span(text, start, end))));
        }
    }
    Ok(report(MatchKind::NotFound, None))
}

fn grounding_note(report: &GroundingReport) -> &'static str {
    match report.match_kind {
        MatchKind::ExactSubstring => "the answer appears verbatim in the passage.",
        MatchKind::NormalizedSubstring => "the answer appears in the passage up to case, spacing and punctuation.",
        MatchKind::NotFound => {
            "WARNING: the answer of this explicit question was not found in the passage. Check carefully for hallucinated content."
        }
        MatchKind::NotApplicable => "not applicable (implicit question).",
    }
}

pub fn build_adjudication_prompt(
    qa: &QAPair,
    segment: &Segment,
    report: &GroundingReport,
    settings: &QcSettings,
) -> ChatPrompt {
    let user = ADJUDICATION.render_user(&[
        ("grounding", grounding_note(report)),
        ("pair", &prompts::pair_json(qa)),
        ("passage", &segment.text),
    ]);
    ChatPrompt::new(ADJUDICATION.system(), user, sampling(settings)).with_template(ADJUDICATION.id)
}

fn sampling(settings: &QcSettings) -> SamplingParams {
    SamplingParams {
        temperature: settings.temperature,
        max_output_tokens: settings.max_output_tokens,
        stop_sequences: Vec::new(),
    }
}

/// Parse a verdict object. A TYPEFIX without a type is read as a flip.
pub fn parse_verdict(raw: &str, qa: &QAPair) -> Result<QCVerdict, String> {
    let obj = first_json_object(raw).ok_or("no JSON object in reply")?;
    let directive = match obj.get("directive").and_then(|v| v.as_str()).map(|s| s.trim().to_ascii_uppercase()) {
        Some(d) if d == "KEEP" => Directive::Keep,
        Some(d) if d == "DELETE" => Directive::Delete,
        Some(d) if d == "TYPEFIX" => Directive::TypeFix,
        Some(d) => return Err(format!("unknown directive {d:?}")),
        None => return Err("missing directive".into()),
    };
    let corrected = obj
        .get("corrected_type")
        .or_else(|| obj.get("corrected_qtype"))
        .and_then(|v| v.as_str())
        .and_then(QType::parse);
    let corrected_qtype = match directive {
        Directive::TypeFix => Some(corrected.unwrap_or(qa.qtype.flipped())),
        _ => None,
    };
    let verdict = QCVerdict {
        qa_id: qa.qa_id.clone(),
        directive,
        corrected_qtype,
        rationale: obj.get("rationale").and_then(|v| v.as_str()).unwrap_or("").to_string(),
    };
    verdict.check(qa.qtype)?;
    Ok(verdict)
}

/// Adjudicate one pair. Never fails: after the retry budget the verdict is
/// DELETE and the event is ledgered.
pub fn adjudicate(qa: &QAPair, segment: &Segment, settings: &QcSettings, client: &Client) -> QCVerdict {
    let report = match grounding_prefilter(qa, segment) {
        Ok(r) => r,
        Err(e) => return QCVerdict::delete(&qa.qa_id, &format!("adjudication unresolved: {e}")),
    };
    if report.match_kind == MatchKind::NotFound {
        client.ledger().record(LedgerEvent::HallucinationWarning { qa_id: qa.qa_id.clone() });
    }
    let prompt = build_adjudication_prompt(qa, segment, &report, settings);
    let mut reason = String::new();
    for _ in 0..=settings.retries {
        match client.complete(&prompt) {
            Ok(raw) => match parse_verdict(&raw, qa) {
                Ok(v) => return v,
                Err(e) => reason = e,
            },
            Err(e) => reason = format!("backend: {e}"),
        }
    }
    client.ledger().record(LedgerEvent::AdjudicationExhausted {
        qa_id: qa.qa_id.clone(),
        reason: reason.clone(),
    });
    QCVerdict::delete(&qa.qa_id, &format!("adjudication unresolved: {reason}"))
}

pub fn build_backfill_prompt(qa: &QAPair, segment: &Segment, settings: &QcSettings) -> ChatPrompt {
    let user = BACKFILL.render_user(&[("pair", &prompts::pair_json(qa)), ("passage", &segment.text)]);
    ChatPrompt::new(BACKFILL.system(), user, sampling(settings)).with_template(BACKFILL.id)
}

fn backfill_reasoning(qa: &QAPair, segment: &Segment, settings: &QcSettings, client: &Client) -> Result<String, String> {
    let prompt = build_backfill_prompt(qa, segment, settings);
    let mut reason = String::new();
    for _ in 0..=settings.backfill_retries {
        match client.complete(&prompt) {
            Ok(raw) => match first_json_object(&raw)
                .and_then(|o| o.get("reasoning").and_then(|r| r.as_str()).map(str::trim).map(String::from))
            {
                Some(r) if !r.is_empty() => return Ok(r),
                _ => reason = "reply lacks a non-empty \"reasoning\" field".into(),
            },
            Err(e) => reason = format!("backend: {e}"),
        }
    }
    Err(reason)
}

/// Apply one verdict per pair: KEEP passes, DELETE drops, TYPEFIX relabels.
/// Pairs relabeled implicit without a reasoning trace get one backfilled; if
/// that fails the pair is dropped and ledgered.
pub fn apply_verdicts(
    pairs: &[QAPair],
    verdicts: &[QCVerdict],
    segment: &Segment,
    settings: &QcSettings,
    client: &Client,
) -> Result<Vec<QAPair>, QcError> {
    if pairs.len() != verdicts.len() {
        return Err(QcError::VerdictMismatch(format!("{} pairs, {} verdicts", pairs.len(), verdicts.len())));
    }
    let by_id: HashMap<&str, &QCVerdict> = verdicts.iter().map(|v| (v.qa_id.as_str(), v)).collect();
    if by_id.len() != verdicts.len() {
        return Err(QcError::VerdictMismatch("duplicate verdict ids".into()));
    }
    let mut out = Vec::new();
    for qa in pairs {
        let v = by_id
            .get(qa.qa_id.as_str())
            .ok_or_else(|| QcError::VerdictMismatch(format!("no verdict for {}", qa.qa_id)))?;
        match v.directive {
            Directive::Keep => out.push(qa.clone()),
            Directive::Delete => {}
            Directive::TypeFix => {
                let to = v
                    .corrected_qtype
                    .ok_or_else(|| QcError::VerdictMismatch(format!("TYPEFIX for {} lacks a type", qa.qa_id)))?;
                let mut fixed = qa.clone();
                fixed.qtype = to;
                if to == QType::Implicit && !fixed.has_reasoning() {
                    match backfill_reasoning(&fixed, segment, settings, client) {
                        Ok(r) => fixed.reasoning = Some(r),
                        Err(reason) => {
                            client.ledger().record(LedgerEvent::BackfillFailed {
                                qa_id: qa.qa_id.clone(),
                                reason,
                            });
                            continue;
                        }
                    }
                }
                out.push(fixed);
            }
        }
    }
    Ok(out)
}

/// Make sure the segment keeps at least one explicit pair, regenerating and
/// adjudicating a single new explicit pair when none survived.
pub fn enforce_segment_floor(
    segment: &Segment,
    kept: Vec<QAPair>,
    gen_settings: &GenerationSettings,
    settings: &QcSettings,
    client: &Client,
) -> Result<Vec<QAPair>, QcError> {
    for qa in &kept {
        check_segment(qa, segment)?;
    }
    if kept.iter().any(|p| p.qtype == QType::Explicit) {
        return Ok(kept);
    }
    let spec = GenerationSpec {
        n_explicit: 1,
        n_implicit: 0,
        require_role_transformation: false,
    };
    let avoid: Vec<String> = kept.iter().map(|p| format!("\"{}\"", p.question)).collect();
    let note = if avoid.is_empty() {
        "- Earlier questions for this passage were rejected; write a new one.\n".to_string()
    } else {
        format!("- Do not repeat these existing questions: {}\n", avoid.join(", "))
    };
    let attempts = settings.floor_retries + 1;
    let no_retry = GenerationSettings {
        retries: 0,
        ..gen_settings.clone()
    };
    for attempt in 0..attempts {
        let note = format!("{note}- Attempt {}.\n", attempt + 1);
        let Ok(mut fresh) = generation::generate_with_note(segment, &spec, &no_retry, client, &note, "r") else {
            continue;
        };
        let Some(mut candidate) = fresh.drain(..).find(|p| p.qtype == QType::Explicit) else {
            continue;
        };
        candidate.qa_id = format!("{}:r{attempt}", segment.segment_id);
        candidate.provenance = Provenance::RegeneratedInQc;
        let verdict = adjudicate(&candidate, segment, settings, client);
        if verdict.directive == Directive::Keep {
            client.ledger().record(LedgerEvent::FloorRegenerated {
                segment_id: segment.segment_id.clone(),
                qa_id: candidate.qa_id.clone(),
            });
            let mut out = kept;
            out.push(candidate);
            return Ok(out);
        }
    }
    client.ledger().record(LedgerEvent::FloorUnsatisfied {
        segment_id: segment.segment_id.clone(),
        dropped_pairs: kept.len(),
    });
    Err(QcError::FloorUnsatisfied {
        segment_id: segment.segment_id.clone(),
        attempts,
    })
}

/// Verdict tallies and survivors of a QC pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcCounters {
    pub pairs_in: usize,
    pub keep: usize,
    pub delete: usize,
    pub typefix: usize,
    pub backfill_failed: usize,
    pub regenerated: usize,
    pub floor_unsatisfied_segments: usize,
    pub dropped_by_floor: usize,
    pub pairs_out: usize,
}

impl QcCounters {
    /// `in = keep + delete + typefix` and
    /// `out = keep + typefix - backfill_failed - dropped_by_floor + regenerated`.
    pub fn reconciles(&self) -> bool {
        self.pairs_in == self.keep + self.delete + self.typefix
            && self.pairs_out + self.backfill_failed + self.dropped_by_floor == self.keep + self.typefix + self.regenerated
    }
}

#[derive(Debug, Clone, Default)]
pub struct QcOutput {
    pub pairs: Vec<QAPair>,
    pub verdicts: Vec<QCVerdict>,
    pub counters: QcCounters,
}

/// Full QC over a stage-1 pool. Pairs of unknown segments are rejected.
/// Output keeps segment order, then pair order within a segment.
pub fn run_qc(
    segments: &[Segment],
    pairs: &[QAPair],
    gen_settings: &GenerationSettings,
    settings: &QcSettings,
    client: &Client,
) -> Result<QcOutput, QcError> {
    let by_id: HashMap<&str, &Segment> = segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    for qa in pairs {
        if !by_id.contains_key(qa.segment_id.as_str()) {
            return Err(QcError::SegmentMismatch {
                qa_id: qa.qa_id.clone(),
                pair_segment: qa.segment_id.clone(),
                segment_id: "<none>".into(),
            });
        }
    }

    let verdicts: Vec<QCVerdict> =
        client.fan_out(pairs, |qa| adjudicate(qa, by_id[qa.segment_id.as_str()], settings, client));

    let mut grouped: Vec<(&Segment, Vec<QAPair>, Vec<QCVerdict>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let order: HashSet<&str> = pairs.iter().map(|p| p.segment_id.as_str()).collect();
    for seg in segments.iter().filter(|s| order.contains(s.segment_id.as_str())) {
        slot.insert(seg.segment_id.as_str(), grouped.len());
        grouped.push((seg, Vec::new(), Vec::new()));
    }
    for (qa, v) in pairs.iter().zip(&verdicts) {
        let g = &mut grouped[slot[qa.segment_id.as_str()]];
        g.1.push(qa.clone());
        g.2.push(v.clone());
    }

    let outcomes = client.fan_out(&grouped, |(seg, ps, vs)| {
        let applied = apply_verdicts(ps, vs, seg, settings, client)?;
        let lost = ps.iter().zip(vs).filter(|(_, v)| v.directive != Directive::Delete).count() - applied.len();
        let before = applied.len();
        match enforce_segment_floor(seg, applied, gen_settings, settings, client) {
            Ok(out) => Ok((out.len() - before, lost, 0usize, out)),
            Err(QcError::FloorUnsatisfied { .. }) => Ok((0, lost, before, Vec::new())),
            Err(e) => Err(e),
        }
    });

    let mut out = QcOutput {
        verdicts,
        ..QcOutput::default()
    };
    let c = &mut out.counters;
    c.pairs_in = pairs.len();
    for v in &out.verdicts {
        match v.directive {
            Directive::Keep => c.keep += 1,
            Directive::Delete => c.delete += 1,
            Directive::TypeFix => c.typefix += 1,
        }
    }
    for o in outcomes {
        let (regenerated, backfill_failed, dropped, kept) = o?;
        c.regenerated += regenerated;
        c.backfill_failed += backfill_failed;
        if dropped > 0 || (kept.is_empty() && regenerated == 0) {
            c.floor_unsatisfied_segments += 1;
        }
        c.dropped_by_floor += dropped;
        out.pairs.extend(kept);
    }
    c.pairs_out = out.pairs.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, BackendError, ChatBackend, Completion, MockBackend, RetryPolicy};
    use crate::ledger::Ledger;
    use crate::prompts::{block, Task};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    const TEXT: &str = "The Eiffel Tower stands in Paris. It was completed in 1889 for the World's Fair.";

    fn seg() -> Segment {
        Segment {
            segment_id: "d#0".into(),
            doc_id: "d".into(),
            index: 0,
            text: TEXT.into(),
            token_count: crate::ingest::count_tokens(TEXT),
        }
    }

    fn pair(id: &str, answer: &str, qtype: QType) -> QAPair {
        QAPair {
            qa_id: format!("d#0:{id}"),
            segment_id: "d#0".into(),
            question: format!("Question {id}?"),
            answer: answer.into(),
            qtype,
            reasoning: (qtype == QType::Implicit).then(|| "Because the passage says so.".to_string()),
            provenance: Provenance::Generated,
        }
    }

    fn client(backend: impl ChatBackend + 'static) -> Client {
        let cfg = BackendConfig {
            max_parallel: 3,
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_base: Duration::from_millis(1),
            },
            ..BackendConfig::default()
        };
        Client::new(Arc::new(backend), cfg, Arc::new(Ledger::new()))
    }

    /// Scripted per-task behaviour on top of the generative mock.
    struct Scripted<F: Fn(Task, &str) -> Option<String> + Send + Sync> {
        f: F,
        calls: AtomicUsize,
    }

    impl<F: Fn(Task, &str) -> Option<String> + Send + Sync> ChatBackend for Scripted<F> {
        fn complete(&self, p: &ChatPrompt) -> Result<Completion, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let task = Task::detect(&p.user).unwrap();
            match (self.f)(task, &p.user) {
                Some(reply) => Ok(Completion::text(reply)),
                None => MockBackend::generative(0).complete(p),
            }
        }
    }

    fn scripted<F: Fn(Task, &str) -> Option<String> + Send + Sync>(f: F) -> Scripted<F> {
        Scripted {
            f,
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn grounding_exact() {
        let r = grounding_prefilter(&pair("q0", "Paris", QType::Explicit), &seg()).unwrap();
        assert_eq!(r.match_kind, MatchKind::ExactSubstring);
        assert!(r.answer_found);
        let (s, e) = r.matched_span.unwrap();
        assert_eq!(TEXT.chars().skip(s).take(e - s).collect::<String>(), "Paris");
    }

    #[test]
    fn grounding_normalized() {
        let r = grounding_prefilter(&pair("q0", "paris.", QType::Explicit), &seg()).unwrap();
        assert_eq!(r.match_kind, MatchKind::NormalizedSubstring);
        let (s, e) = r.matched_span.unwrap();
        assert_eq!(TEXT.chars().skip(s).take(e - s).collect::<String>(), "Paris");

        let r = grounding_prefilter(&pair("q1", "the  WORLD'S fair", QType::Explicit), &seg()).unwrap();
        assert_eq!(r.match_kind, MatchKind::NormalizedSubstring);
    }

    #[test]
    fn grounding_implicit_and_missing() {
        let r = grounding_prefilter(&pair("q0", "Paris", QType::Implicit), &seg()).unwrap();
        assert_eq!(r.match_kind, MatchKind::NotApplicable);
        assert!(!r.answer_found);
        let r = grounding_prefilter(&pair("q1", "London", QType::Explicit), &seg()).unwrap();
        assert_eq!((r.match_kind, r.answer_found), (MatchKind::NotFound, false));
    }

    #[test]
    fn grounding_rejects_foreign_segment() {
        let mut p = pair("q0", "Paris", QType::Explicit);
        p.segment_id = "other#1".into();
        assert!(matches!(grounding_prefilter(&p, &seg()), Err(QcError::SegmentMismatch { .. })));
    }

    #[test]
    fn not_found_is_flagged_in_prompt() {
        let p = pair("q0", "London", QType::Explicit);
        let r = grounding_prefilter(&p, &seg()).unwrap();
        let prompt = build_adjudication_prompt(&p, &seg(), &r, &QcSettings::default());
        assert!(prompt.user.contains("WARNING"));
        assert_eq!(prompt.params.temperature, 0.0);
        assert_eq!(block(&prompt.user, "passage"), Some(TEXT));
    }

    #[test]
    fn adjudicate_keep_typefix_delete() {
        let c = client(MockBackend::generative(1));
        let keep = adjudicate(&pair("q0", "Paris", QType::Explicit), &seg(), &QcSettings::default(), &c);
        assert_eq!(keep.directive, Directive::Keep);

        let mut verbatim_implicit = pair("q1", "1889", QType::Implicit);
        verbatim_implicit.question = "In which year was it completed?".into();
        let fix = adjudicate(&verbatim_implicit, &seg(), &QcSettings::default(), &c);
        assert_eq!(fix.directive, Directive::TypeFix);
        assert_eq!(fix.corrected_qtype, Some(QType::Explicit));

        let del = adjudicate(&pair("q2", "Berlin", QType::Explicit), &seg(), &QcSettings::default(), &c);
        assert_eq!(del.directive, Directive::Delete);
        assert_eq!(c.ledger().count("hallucination_warning"), 1);
    }

    #[test]
    fn unparseable_adjudication_fails_closed() {
        let backend = scripted(|_, _| Some("I think it is fine".into()));
        let c = client(backend);
        let v = adjudicate(&pair("q0", "Paris", QType::Explicit), &seg(), &QcSettings::default(), &c);
        assert_eq!(v.directive, Directive::Delete);
        assert!(v.rationale.starts_with("adjudication unresolved"));
        assert_eq!(c.ledger().count("backend_call"), 3);
        assert_eq!(c.ledger().count("adjudication_exhausted"), 1);
    }

    #[test]
    fn verdict_parsing_rules() {
        let qa = pair("q0", "Paris", QType::Explicit);
        let v = parse_verdict(r#"{"directive": "keep", "corrected_type": "implicit", "rationale": "ok"}"#, &qa).unwrap();
        assert_eq!((v.directive, v.corrected_qtype), (Directive::Keep, None));
        let v = parse_verdict(r#"{"directive": "TYPEFIX"}"#, &qa).unwrap();
        assert_eq!(v.corrected_qtype, Some(QType::Implicit));
        assert!(parse_verdict(r#"{"directive": "TYPEFIX", "corrected_type": "explicit"}"#, &qa).is_err());
        assert!(parse_verdict(r#"{"directive": "MAYBE"}"#, &qa).is_err());
        assert!(parse_verdict("KEEP", &qa).is_err());
    }

    #[test]
    fn verdict_invariants() {
        assert!(QCVerdict::typefix("a", QType::Implicit).check(QType::Explicit).is_ok());
        assert!(QCVerdict::typefix("a", QType::Explicit).check(QType::Explicit).is_err());
        assert!(QCVerdict::keep("a").check(QType::Implicit).is_ok());
        let mut bad = QCVerdict::delete("a", "");
        bad.corrected_qtype = Some(QType::Explicit);
        assert!(bad.check(QType::Implicit).is_err());
    }

    #[test]
    fn verdict_wire_format() {
        let v = QCVerdict::typefix("d#0:q1", QType::Explicit);
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"qa_id":"d#0:q1","directive":"TYPEFIX","corrected_qtype":"explicit","rationale":""}"#
        );
    }

    #[test]
    fn apply_filters_deleted() {
        let c = client(MockBackend::generative(0));
        let pairs = vec![
            pair("q0", "Paris", QType::Explicit),
            pair("q1", "1889", QType::Explicit),
            pair("q2", "x", QType::Explicit),
        ];
        let verdicts = vec![QCVerdict::keep("d#0:q0"), QCVerdict::keep("d#0:q1"), QCVerdict::delete("d#0:q2", "")];
        let out = apply_verdicts(&pairs, &verdicts, &seg(), &QcSettings::default(), &c).unwrap();
        assert_eq!(out.len(), 2);
        assert!(apply_verdicts(&[], &[], &seg(), &QcSettings::default(), &c).unwrap().is_empty());
    }

    #[test]
    fn typefix_to_implicit_backfills_reasoning() {
        let c = client(MockBackend::generative(0));
        let pairs = vec![pair("q0", "Paris", QType::Explicit)];
        let out = apply_verdicts(
            &pairs,
            &[QCVerdict::typefix("d#0:q0", QType::Implicit)],
            &seg(),
            &QcSettings::default(),
            &c,
        )
        .unwrap();
        assert_eq!(out[0].qtype, QType::Implicit);
        assert!(out[0].has_reasoning());
        assert_eq!(c.ledger().count("backend_call"), 1);
    }

    #[test]
    fn failed_backfill_drops_pair() {
        let c = client(scripted(|_, _| Some("{}".into())));
        let out = apply_verdicts(
            &[pair("q0", "Paris", QType::Explicit)],
            &[QCVerdict::typefix("d#0:q0", QType::Implicit)],
            &seg(),
            &QcSettings::default(),
            &c,
        )
        .unwrap();
        assert!(out.is_empty());
        assert_eq!(c.ledger().count("backfill_failed"), 1);
    }

    #[test]
    fn verdict_id_mismatch() {
        let c = client(MockBackend::generative(0));
        let err = apply_verdicts(
            &[pair("q0", "Paris", QType::Explicit)],
            &[QCVerdict::keep("d#0:zz")],
            &seg(),
            &QcSettings::default(),
            &c,
        )
        .unwrap_err();
        assert!(matches!(err, QcError::VerdictMismatch(_)));
        assert!(apply_verdicts(&[], &[QCVerdict::keep("x")], &seg(), &QcSettings::default(), &c).is_err());
    }

    #[test]
    fn floor_already_met_is_unchanged() {
        let backend = Arc::new(scripted(|_, _| None));
        let c = client(backend.clone());
        let kept = vec![pair("q0", "Paris", QType::Explicit), pair("q1", "a symbol", QType::Implicit)];
        let out =
            enforce_segment_floor(&seg(), kept.clone(), &GenerationSettings::default(), &QcSettings::default(), &c)
                .unwrap();
        assert_eq!(out, kept);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn wholesale_deletion_regenerates_exactly_one() {
        let c = client(MockBackend::generative(3));
        let out = enforce_segment_floor(&seg(), vec![], &GenerationSettings::default(), &QcSettings::default(), &c)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].qtype, QType::Explicit);
        assert_eq!(out[0].provenance, Provenance::RegeneratedInQc);
        assert_eq!(out[0].qa_id, "d#0:r0");
        assert_eq!(c.ledger().count("floor_regenerated"), 1);
    }

    #[test]
    fn regeneration_failure_is_floor_unsatisfied() {
        let c = client(scripted(|t, _| (t == Task::QaGeneration).then(|| "no".to_string())));
        let kept = vec![pair("q0", "a", QType::Implicit), pair("q1", "b", QType::Implicit)];
        let err = enforce_segment_floor(&seg(), kept, &GenerationSettings::default(), &QcSettings::default(), &c)
            .unwrap_err();
        assert_eq!(
            err,
            QcError::FloorUnsatisfied {
                segment_id: "d#0".into(),
                attempts: 3
            }
        );
        assert_eq!(c.ledger().count("floor_unsatisfied"), 1);
    }

    #[test]
    fn rejected_regeneration_is_retried() {
        // first regeneration is deleted by the adjudicator, second kept
        let c = client(scripted(|t, user| {
            (t == Task::QaAdjudication && user.contains(":r0")).then(|| r#"{"directive":"DELETE"}"#.to_string())
        }));
        let out = enforce_segment_floor(&seg(), vec![], &GenerationSettings::default(), &QcSettings::default(), &c)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].qa_id, "d#0:r1");
    }

    #[test]
    fn run_qc_counts_reconcile() {
        let c = client(MockBackend::generative(5));
        let mut typefix_me = pair("q2", "1889", QType::Implicit);
        typefix_me.question = "When?".into();
        let pairs = vec![
            pair("q0", "Paris", QType::Explicit),
            pair("q1", "Rome", QType::Explicit),
            typefix_me,
            pair("q3", "it became iconic", QType::Implicit),
        ];
        let out = run_qc(&[seg()], &pairs, &GenerationSettings::default(), &QcSettings::default(), &c).unwrap();
        let k = &out.counters;
        assert_eq!((k.keep, k.delete, k.typefix), (2, 1, 1));
        assert!(k.reconciles());
        assert_eq!(out.verdicts.len(), 4);
        assert_eq!(out.pairs.len(), 3);
        assert!(out.pairs.iter().any(|p| p.qtype == QType::Explicit));
    }

    #[test]
    fn run_qc_rejects_unknown_segment() {
        let c = client(MockBackend::generative(5));
        let mut p = pair("q0", "Paris", QType::Explicit);
        p.segment_id = "ghost#0".into();
        assert!(run_qc(&[seg()], &[p], &GenerationSettings::default(), &QcSettings::default(), &c).is_err());
    }
}
