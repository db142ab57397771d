//! QA generation: one prompt per segment asking for a fixed number of
//! explicit (extractive) and implicit (inferential, with a reasoning trace)
//! question-answer pairs, and a tolerant parser for the model's JSON reply.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{ChatPrompt, Client, SamplingParams};
use crate::extract::first_json_array;
use crate::ingest::Segment;
use crate::ledger::LedgerEvent;
use crate::normalize::normalize_span;
use crate::prompts::GENERATION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Explicit,
    Implicit,
}

impl QType {
    pub fn as_str(self) -> &'static str {
        match self {
            QType::Explicit => "explicit",
            QType::Implicit => "implicit",
        }
    }

    pub fn parse(s: &str) -> Option<QType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "explicit" => Some(QType::Explicit),
            "implicit" => Some(QType::Implicit),
            _ => None,
        }
    }

    pub fn flipped(self) -> QType {
        match self {
            QType::Explicit => QType::Implicit,
            QType::Implicit => QType::Explicit,
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    RegeneratedInQc,
}

/// One generated question-answer pair. Serialized as a stage-1/stage-2 record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub qa_id: String,
    pub segment_id: String,
    pub question: String,
    pub answer: String,
    pub qtype: QType,
    pub reasoning: Option<String>,
    pub provenance: Provenance,
}

impl QAPair {
    pub fn has_reasoning(&self) -> bool {
        self.reasoning.as_deref().is_some_and(|r| !r.trim().is_empty())
    }

    /// Record-level invariants: non-empty text, implicit pairs carry reasoning.
    pub fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.answer.trim().is_empty() {
            return Err("answer is empty".into());
        }
        if self.qtype == QType::Implicit && !self.has_reasoning() {
            return Err("implicit pair without reasoning".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub n_explicit: usize,
    pub n_implicit: usize,
    pub require_role_transformation: bool,
}

impl GenerationSpec {
    /// 2 explicit + 1 implicit per segment.
    pub const SQUAD: GenerationSpec = GenerationSpec {
        n_explicit: 2,
        n_implicit: 1,
        require_role_transformation: true,
    };
    /// 3 explicit + 3 implicit per segment.
    pub const COVID_QA: GenerationSpec = GenerationSpec {
        n_explicit: 3,
        n_implicit: 3,
        require_role_transformation: true,
    };

    pub fn new(n_explicit: usize, n_implicit: usize) -> Result<Self, GenerationError> {
        let spec = GenerationSpec {
            n_explicit,
            n_implicit,
            require_role_transformation: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn total(&self) -> usize {
        self.n_explicit + self.n_implicit
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.total() == 0 {
            return Err(GenerationError::InvalidSpec("n_explicit + n_implicit must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self::SQUAD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Re-prompts after an unparseable reply.
    pub retries: u32,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_output_tokens: 2048,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseFailureKind {
    NoJson,
    Schema { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", self.describe())]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub raw: String,
}

impl ParseFailure {
    fn describe(&self) -> String {
        match &self.kind {
            ParseFailureKind::NoJson => "no JSON array found in the reply".into(),
            ParseFailureKind::Schema { path, reason } => format!("schema violation at {path}: {reason}"),
        }
    }

    fn schema(path: String, reason: &str, raw: &str) -> Self {
        ParseFailure {
            kind: ParseFailureKind::Schema {
                path,
                reason: reason.into(),
            },
            raw: raw.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("generation exhausted for segment {segment_id} after {attempts} attempts: {reason}")]
    Exhausted {
        segment_id: String,
        attempts: u32,
        reason: String,
    },
}

fn directive_lines(spec: &GenerationSpec) -> String {
    let mut lines = Vec::new();
    if spec.n_explicit > 0 {
        lines.push(format!(
            "- Write exactly {} explicit questions. Each one targets a single entity or fact stated in the passage, and its answer is a short span copied verbatim from the passage. Set \"reasoning\" to null.",
            spec.n_explicit
        ));
    }
    if spec.n_implicit > 0 {
        lines.push(format!(
            "- Write exactly {} implicit questions. Each one requires inference or combining several statements of the passage. Give a step-by-step \"reasoning\" trace that ends in the answer.",
            spec.n_implicit
        ));
    }
    if spec.require_role_transformation {
        lines.push(
            "- Vary how the questions are phrased: rotate which semantic role (agent, patient, time, place, cause, manner) each question puts in focus, so that rephrasings of the same fact keep the same answer."
                .into(),
        );
    }
    lines.join("\n")
}

pub fn build_generation_prompt(segment: &Segment, spec: &GenerationSpec) -> ChatPrompt {
    build_prompt_with(segment, spec, "", &GenerationSettings::default())
}

fn build_prompt_with(segment: &Segment, spec: &GenerationSpec, extra: &str, settings: &GenerationSettings) -> ChatPrompt {
    let total = spec.total().to_string();
    let directives = directive_lines(spec);
    let user = GENERATION.render_user(&[
        ("total", &total),
        ("directives", &directives),
        ("extra", extra),
        ("passage", &segment.text),
    ]);
    ChatPrompt::new(
        GENERATION.system(),
        user,
        SamplingParams {
            temperature: settings.temperature,
            max_output_tokens: settings.max_output_tokens,
            stop_sequences: Vec::new(),
        },
    )
    .with_template(GENERATION.id)
}

fn field_string(obj: &serde_json::Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Parse the first JSON array in `raw` into pairs for `segment_id`. Ids are
/// `<segment_id>:q<n>` in array order.
pub fn parse_generation_output(raw: &str, segment_id: &str) -> Result<Vec<QAPair>, ParseFailure> {
    let items = first_json_array(raw).ok_or_else(|| ParseFailure {
        kind: ParseFailureKind::NoJson,
        raw: raw.into(),
    })?;
    let mut pairs = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let Value::Object(obj) = item else {
            return Err(ParseFailure::schema(format!("[{i}]"), "element is not an object", raw));
        };
        let question = field_string(obj, "question")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ParseFailure::schema(format!("[{i}].question"), "missing or empty", raw))?;
        let answer = field_string(obj, "answer")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ParseFailure::schema(format!("[{i}].answer"), "missing or empty", raw))?;
        let qtype = obj
            .get("type")
            .and_then(Value::as_str)
            .and_then(QType::parse)
            .ok_or_else(|| ParseFailure::schema(format!("[{i}].type"), "must be \"explicit\" or \"implicit\"", raw))?;
        let reasoning = match obj.get("reasoning") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s.trim().is_empty() => None,
            Some(Value::String(s)) => Some(s.trim().to_string()),
            Some(_) => return Err(ParseFailure::schema(format!("[{i}].reasoning"), "must be a string or null", raw)),
        };
        if qtype == QType::Implicit && reasoning.is_none() {
            return Err(ParseFailure::schema(
                format!("[{i}].reasoning"),
                "required for implicit questions",
                raw,
            ));
        }
        pairs.push(QAPair {
            qa_id: format!("{segment_id}:q{i}"),
            segment_id: segment_id.to_string(),
            question,
            answer,
            qtype,
            reasoning,
            provenance: Provenance::Generated,
        });
    }
    Ok(pairs)
}

/// Keep at most the requested number of pairs per type, in reply order.
/// Returns the kept pairs and how many were dropped as excess.
fn select_per_type(pairs: Vec<QAPair>, spec: &GenerationSpec) -> (Vec<QAPair>, usize) {
    let mut taken: HashMap<QType, usize> = HashMap::new();
    let mut kept = Vec::new();
    let mut dropped = 0;
    for p in pairs {
        let limit = match p.qtype {
            QType::Explicit => spec.n_explicit,
            QType::Implicit => spec.n_implicit,
        };
        let n = taken.entry(p.qtype).or_default();
        if *n < limit {
            *n += 1;
            kept.push(p);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

/// Generate pairs for one segment, re-prompting with a corrective note when
/// the reply cannot be parsed. Shortfalls against the spec are ledgered,
/// never padded.
pub fn generate_for_segment(
    segment: &Segment,
    spec: &GenerationSpec,
    settings: &GenerationSettings,
    client: &Client,
) -> Result<Vec<QAPair>, GenerationError> {
    generate_with_note(segment, spec, settings, client, "", "q")
}

pub(crate) fn generate_with_note(
    segment: &Segment,
    spec: &GenerationSpec,
    settings: &GenerationSettings,
    client: &Client,
    note: &str,
    id_tag: &str,
) -> Result<Vec<QAPair>, GenerationError> {
    spec.validate()?;
    let ledger = client.ledger();
    let attempts = settings.retries + 1;
    let mut last_reason = String::new();

    for attempt in 1..=attempts {
        let extra = if last_reason.is_empty() {
            note.to_string()
        } else {
            format!(
                "{note}- Your previous reply could not be used ({last_reason}). Reply with the JSON array only, and include \"reasoning\" for every implicit question.\n"
            )
        };
        let prompt = build_prompt_with(segment, spec, &extra, settings);
        let outcome = client
            .complete(&prompt)
            .map_err(|e| format!("backend: {e}"))
            .and_then(|raw| parse_generation_output(&raw, &segment.segment_id).map_err(|e| e.to_string()))
            .and_then(|pairs| {
                if pairs.is_empty() {
                    Err("the JSON array was empty".to_string())
                } else {
                    Ok(pairs)
                }
            });

        let pairs = match outcome {
            Ok(p) => p,
            Err(reason) => {
                ledger.record(LedgerEvent::GenerationRetry {
                    segment_id: segment.segment_id.clone(),
                    attempt,
                    reason: reason.clone(),
                });
                last_reason = reason;
                continue;
            }
        };

        let (mut kept, dropped) = select_per_type(pairs, spec);
        for (k, p) in kept.iter_mut().enumerate() {
            p.qa_id = format!("{}:{id_tag}{k}", segment.segment_id);
        }
        if dropped > 0 {
            ledger.record(LedgerEvent::GenerationExcess {
                segment_id: segment.segment_id.clone(),
                dropped,
            });
        }
        let got_e = kept.iter().filter(|p| p.qtype == QType::Explicit).count();
        let got_i = kept.len() - got_e;
        if got_e < spec.n_explicit || got_i < spec.n_implicit {
            ledger.record(LedgerEvent::GenerationShortfall {
                segment_id: segment.segment_id.clone(),
                explicit_expected: spec.n_explicit,
                explicit_got: got_e,
                implicit_expected: spec.n_implicit,
                implicit_got: got_i,
            });
        }
        let dup = duplicate_answers(&kept);
        if dup > 0 {
            ledger.record(LedgerEvent::DuplicateAnswers {
                segment_id: segment.segment_id.clone(),
                duplicates: dup,
            });
        }
        return Ok(kept);
    }

    ledger.record(LedgerEvent::GenerationExhausted {
        segment_id: segment.segment_id.clone(),
        reason: last_reason.clone(),
    });
    Err(GenerationError::Exhausted {
        segment_id: segment.segment_id.clone(),
        attempts,
        reason: last_reason,
    })
}

/// Pairs whose normalized answer repeats an earlier pair's answer in the same
/// segment; a proxy for how often role-transformed rephrasings kept the answer.
pub fn duplicate_answers(pairs: &[QAPair]) -> usize {
    let mut seen = std::collections::HashSet::new();
    pairs.iter().filter(|p| !seen.insert(normalize_span(&p.answer))).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, ChatBackend, MockBackend, RetryPolicy};
    use crate::ledger::Ledger;
    use std::sync::Arc;
    use std::time::Duration;

    pub(crate) fn segment(text: &str) -> Segment {
        Segment {
            segment_id: "doc#0".into(),
            doc_id: "doc".into(),
            index: 0,
            text: text.into(),
            token_count: crate::ingest::count_tokens(text),
        }
    }

    fn client(backend: impl ChatBackend + 'static) -> Client {
        let cfg = BackendConfig {
            max_parallel: 2,
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_base: Duration::from_millis(1),
            },
            ..BackendConfig::default()
        };
        Client::new(Arc::new(backend), cfg, Arc::new(Ledger::new()))
    }

    const THREE: &str = r#"[
        {"question": "Where is the tower?", "answer": "Paris", "type": "explicit", "reasoning": null},
        {"question": "Who built it?", "answer": "Eiffel", "type": "explicit"},
        {"question": "Why is it famous?", "answer": "It became a symbol", "type": "implicit", "reasoning": "It is widely pictured, so it became a symbol."}
    ]"#;

    #[test]
    fn prompt_contains_directives_and_schema() {
        let p = build_generation_prompt(&segment("Text."), &GenerationSpec::SQUAD);
        assert!(p.user.contains("Write exactly 2 explicit questions"));
        assert!(p.user.contains("Write exactly 1 implicit questions"));
        assert!(p.user.contains(r#""type": "explicit" | "implicit""#));
        assert!(p.user.contains("semantic role"));
        assert_eq!(p.template, "generation/v1");
        assert_eq!(p.params.temperature, 0.7);
    }

    #[test]
    fn prompt_omits_explicit_branch() {
        let spec = GenerationSpec::new(0, 3).unwrap();
        let p = build_generation_prompt(&segment("Text."), &spec);
        assert!(!p.user.contains("explicit questions"));
        assert!(p.user.contains("Write exactly 3 implicit questions"));
    }

    #[test]
    fn covid_recipe_prompt() {
        let p = build_generation_prompt(&segment("Text."), &GenerationSpec::COVID_QA);
        assert!(p.user.contains("write 6 question-answer pairs"));
        assert!(p.user.contains("Write exactly 3 explicit questions"));
        assert!(p.user.contains("Write exactly 3 implicit questions"));
    }

    #[test]
    fn spec_must_request_something() {
        assert!(GenerationSpec::new(0, 0).is_err());
    }

    #[test]
    fn parses_clean_array() {
        let pairs = parse_generation_output(THREE, "s#1").unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].qa_id, "s#1:q0");
        assert_eq!(pairs[2].qtype, QType::Implicit);
        assert!(pairs[2].has_reasoning());
        assert_eq!(pairs[1].reasoning, None);
    }

    #[test]
    fn leading_chatter_is_ignored() {
        let chatty = format!("Here are the questions:\n{THREE}\nLet me know if you need more.");
        assert_eq!(
            parse_generation_output(&chatty, "s#1").unwrap(),
            parse_generation_output(THREE, "s#1").unwrap()
        );
    }

    #[test]
    fn implicit_without_reasoning_names_the_field() {
        let raw = r#"[{"question": "Q", "answer": "A", "type": "explicit"}, {"question": "Why?", "answer": "B", "type": "implicit"}]"#;
        let err = parse_generation_output(raw, "s").unwrap_err();
        assert_eq!(
            err.kind,
            ParseFailureKind::Schema {
                path: "[1].reasoning".into(),
                reason: "required for implicit questions".into()
            }
        );
        assert_eq!(err.raw, raw);
    }

    #[test]
    fn other_schema_violations() {
        assert_eq!(parse_generation_output("nothing", "s").unwrap_err().kind, ParseFailureKind::NoJson);
        let bad_type = r#"[{"question": "Q", "answer": "A", "type": "other"}]"#;
        assert!(matches!(
            parse_generation_output(bad_type, "s").unwrap_err().kind,
            ParseFailureKind::Schema { ref path, .. } if path == "[0].type"
        ));
        let empty_answer = r#"[{"question": "Q", "answer": " ", "type": "explicit"}]"#;
        assert!(parse_generation_output(empty_answer, "s").is_err());
    }

    #[test]
    fn generative_mock_delivers_covid_recipe() {
        let text = "The city council approved a new budget for public transport on Monday. \
            The plan adds three tram lines and extends night bus service. Officials said the \
            changes respond to rising ridership since the pandemic. Critics argued that fares \
            should have been frozen instead. Construction of the first tram line begins next spring, \
            and the council expects it to open within two years.";
        let c = client(MockBackend::generative(7));
        let pairs =
            generate_for_segment(&segment(text), &GenerationSpec::COVID_QA, &GenerationSettings::default(), &c).unwrap();
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs.iter().filter(|p| p.qtype == QType::Explicit).count(), 3);
        assert_eq!(pairs.iter().filter(|p| p.qtype == QType::Implicit).count(), 3);
        assert!(pairs.iter().all(|p| p.segment_id == "doc#0" && p.check().is_ok()));
    }

    #[test]
    fn scripted_squad_recipe() {
        let c = client(MockBackend::always(THREE));
        let pairs = generate_for_segment(
            &segment("Paris. Eiffel."),
            &GenerationSpec::SQUAD,
            &GenerationSettings::default(),
            &c,
        )
        .unwrap();
        let explicit = pairs.iter().filter(|p| p.qtype == QType::Explicit).count();
        assert_eq!((explicit, pairs.len() - explicit), (2, 1));
        assert_eq!(c.ledger().count("generation_shortfall"), 0);
    }

    #[test]
    fn prose_only_exhausts_retry_budget() {
        let c = client(MockBackend::always("I would rather not."));
        let settings = GenerationSettings {
            retries: 3,
            ..GenerationSettings::default()
        };
        let err = generate_for_segment(&segment("Text."), &GenerationSpec::SQUAD, &settings, &c).unwrap_err();
        assert!(matches!(err, GenerationError::Exhausted { attempts: 4, .. }));
        assert_eq!(c.ledger().count("backend_call"), 4);
        assert_eq!(c.ledger().count("generation_retry"), 4);
        assert_eq!(c.ledger().count("generation_exhausted"), 1);
    }

    #[test]
    fn under_delivery_is_ledgered_not_padded() {
        let one = r#"[{"question": "Q", "answer": "A", "type": "explicit"}]"#;
        let c = client(MockBackend::always(one));
        let pairs =
            generate_for_segment(&segment("A."), &GenerationSpec::COVID_QA, &GenerationSettings::default(), &c).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(c.ledger().count("generation_shortfall"), 1);
    }

    #[test]
    fn over_delivery_is_truncated_per_type() {
        let c = client(MockBackend::always(THREE));
        let spec = GenerationSpec::new(1, 1).unwrap();
        let pairs = generate_for_segment(&segment("x"), &spec, &GenerationSettings::default(), &c).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].answer, "Paris");
        assert_eq!(pairs[1].qa_id, "doc#0:q1");
        assert_eq!(c.ledger().count("generation_excess"), 1);
    }

    #[test]
    fn wire_format() {
        let p = parse_generation_output(THREE, "d#0").unwrap().remove(1);
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"qa_id":"d#0:q1","segment_id":"d#0","question":"Who built it?","answer":"Eiffel","qtype":"explicit","reasoning":null,"provenance":"generated"}"#
        );
        let mut r = p.clone();
        r.provenance = Provenance::RegeneratedInQc;
        assert!(serde_json::to_string(&r).unwrap().contains("\"regenerated_in_qc\""));
    }
}
