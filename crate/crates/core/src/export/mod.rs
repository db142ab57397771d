//! SFT export: validation, repair, dedup and rendering to JSONL.
//!
//! Input is a JSONL file of pipeline records (pairs for `qa_plain` and
//! `qa_cot`, items for `mcq`). Every non-blank input line ends up in exactly
//! one of three places: the export, the quarantine file, or the dedup log.

mod repair;
mod schema;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::Client;
use crate::counterfactual::MCQItem;
use crate::fsio;
use crate::generation::{QAPair, QType};
use crate::ledger::{Ledger, LedgerEvent};
use crate::normalize::normalize_span;
use crate::prompts;

pub use repair::{build_repair_prompt, mechanical_fix, repair_mechanical, repair_record, RepairTier, Unrepairable};
pub use schema::{validate_line, validate_record, validate_value, Format, RecordKind, SchemaError};

/// Separates the reasoning trace from the final answer in `qa_cot` output.
pub const ANSWER_DELIMITER: &str = "\n\nAnswer: ";

pub const ANSWER_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExportItem {
    Qa(QAPair),
    Mcq(MCQItem),
}

impl ExportItem {
    pub fn id(&self) -> &str {
        match self {
            ExportItem::Qa(q) => &q.qa_id,
            ExportItem::Mcq(m) => &m.qa_id,
        }
    }

    fn dedup_key(&self) -> (String, String) {
        match self {
            ExportItem::Qa(q) => (normalize_span(&q.question), normalize_span(&q.answer)),
            ExportItem::Mcq(m) => (normalize_span(&m.stem), normalize_span(m.answer())),
        }
    }

    fn from_value(v: Value, kind: RecordKind) -> Option<Self> {
        match kind {
            RecordKind::QaPair => serde_json::from_value(v).ok().map(ExportItem::Qa),
            RecordKind::McqItem => serde_json::from_value(v).ok().map(ExportItem::Mcq),
            RecordKind::Export(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub format: Format,
    pub include_context: bool,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
}

impl ExportOptions {
    pub fn new(format: Format) -> Self {
        Self {
            format,
            include_context: false,
            config_hash: None,
            seeds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub line: usize,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format: Format,
    pub include_context: bool,
    pub answer_delimiter: String,
    pub n_input: usize,
    pub n_exported: usize,
    pub n_quarantined: usize,
    pub n_deduped: usize,
    pub n_repaired_mechanical: usize,
    pub n_repaired_llm: usize,
    pub config_hash: Option<String>,
    pub template_versions: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

impl ExportManifest {
    pub fn conserves(&self) -> bool {
        self.n_exported + self.n_quarantined + self.n_deduped == self.n_input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOutcome {
    pub lines: Vec<String>,
    pub quarantine: Vec<QuarantineEntry>,
    pub manifest: ExportManifest,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("line {line}: format {format} needs {expected} records but found another kind")]
    KindMismatch {
        line: usize,
        format: &'static str,
        expected: &'static str,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Drop pairs whose normalized (question, answer) repeats an earlier pair.
/// Returns the survivors and `(removed id, kept id)` for each removal.
pub fn dedup(pairs: &[QAPair]) -> (Vec<QAPair>, Vec<(String, String)>) {
    let mut first: HashMap<(String, String), &str> = HashMap::new();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for p in pairs {
        let key = (normalize_span(&p.question), normalize_span(&p.answer));
        match first.get(&key) {
            Some(orig) => removed.push((p.qa_id.clone(), orig.to_string())),
            None => {
                first.insert(key, &p.qa_id);
                kept.push(p.clone());
            }
        }
    }
    (kept, removed)
}

/// Render one item in the chosen format. `contexts` maps segment ids to text
/// and is consulted only for QA formats with `include_context`.
pub fn render(item: &ExportItem, opts: &ExportOptions, contexts: &HashMap<String, String>) -> Result<Value, String> {
    match (item, opts.format) {
        (ExportItem::Mcq(m), Format::Mcq) => Ok(json!({
            "stem": m.stem,
            "options": m.options,
            "answer_letter": ANSWER_LETTERS[m.correct_index].to_string(),
        })),
        (ExportItem::Qa(q), Format::QaPlain | Format::QaCot) => {
            let input = if opts.include_context {
                contexts
                    .get(&q.segment_id)
                    .ok_or_else(|| format!("no text for segment {}", q.segment_id))?
                    .as_str()
            } else {
                ""
            };
            let output = match (opts.format, q.qtype, q.reasoning.as_deref()) {
                (Format::QaCot, QType::Implicit, Some(r)) => format!("{}{ANSWER_DELIMITER}{}", r.trim(), q.answer),
                _ => q.answer.clone(),
            };
            Ok(json!({"instruction": q.question, "input": input, "output": output}))
        }
        _ => Err(format!("item {} does not fit format {}", item.id(), opts.format.as_str())),
    }
}

/// Validate, repair, dedup and render the records in `input`.
pub fn export_dataset(
    input: &str,
    opts: &ExportOptions,
    contexts: &HashMap<String, String>,
    client: Option<&Client>,
    ledger: &Ledger,
) -> Result<ExportOutcome, ExportError> {
    let kind = opts.format.source_kind();
    let other = match kind {
        RecordKind::QaPair => RecordKind::McqItem,
        _ => RecordKind::QaPair,
    };
    let mut manifest = ExportManifest {
        format: opts.format,
        include_context: opts.include_context,
        answer_delimiter: ANSWER_DELIMITER.into(),
        n_input: 0,
        n_exported: 0,
        n_quarantined: 0,
        n_deduped: 0,
        n_repaired_mechanical: 0,
        n_repaired_llm: 0,
        config_hash: opts.config_hash.clone(),
        template_versions: prompts::ALL.iter().map(|t| t.id.to_string()).collect(),
        seeds: opts.seeds.clone(),
    };
    let mut quarantine = Vec::new();
    let mut items: Vec<(usize, String, ExportItem)> = Vec::new();

    for (i, raw) in input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line = i + 1;
        manifest.n_input += 1;
        if validate_line(raw, kind).is_err() && validate_line(raw, other).is_ok() {
            return Err(ExportError::KindMismatch {
                line,
                format: opts.format.as_str(),
                expected: if kind == RecordKind::QaPair { "pair" } else { "multiple-choice" },
            });
        }
        match repair_record(raw, kind, client) {
            Ok((v, tier)) => {
                match tier {
                    RepairTier::None => {}
                    RepairTier::Mechanical => manifest.n_repaired_mechanical += 1,
                    RepairTier::Llm => manifest.n_repaired_llm += 1,
                }
                if tier != RepairTier::None {
                    ledger.record(LedgerEvent::Repaired {
                        line,
                        tier: tier.as_str().into(),
                    });
                }
                let item = ExportItem::from_value(v, kind).expect("validated record deserializes");
                items.push((line, raw.to_string(), item));
            }
            Err(Unrepairable { reason }) => quarantine.push(QuarantineEntry {
                line,
                reason,
                raw: raw.to_string(),
            }),
        }
    }

    let mut first_id: HashMap<(String, String), String> = HashMap::new();
    let mut lines = Vec::new();
    for (line, raw, item) in items {
        let key = item.dedup_key();
        if let Some(orig) = first_id.get(&key) {
            manifest.n_deduped += 1;
            ledger.record(LedgerEvent::Deduplicated {
                qa_id: item.id().to_string(),
                duplicate_of: orig.clone(),
            });
            continue;
        }
        first_id.insert(key, item.id().to_string());
        let rendered = render(&item, opts, contexts)
            .map(|v| serde_json::to_string(&v).expect("json value"))
            .and_then(|s| validate_record(&s, opts.format).map(|_| s).map_err(|e| e.to_string()));
        match rendered {
            Ok(s) => lines.push(s),
            Err(reason) => quarantine.push(QuarantineEntry { line, reason, raw }),
        }
    }

    quarantine.sort_by_key(|q| q.line);
    for q in &quarantine {
        ledger.record(LedgerEvent::Quarantined {
            line: q.line,
            reason: q.reason.clone(),
        });
    }
    manifest.n_exported = lines.len();
    manifest.n_quarantined = quarantine.len();
    Ok(ExportOutcome {
        lines,
        quarantine,
        manifest,
    })
}

/// Serialize typed items and export them.
pub fn export_items(
    items: &[ExportItem],
    opts: &ExportOptions,
    contexts: &HashMap<String, String>,
    ledger: &Ledger,
) -> Result<ExportOutcome, ExportError> {
    let input: String = items
        .iter()
        .map(|i| match i {
            ExportItem::Qa(q) => serde_json::to_string(q),
            ExportItem::Mcq(m) => serde_json::to_string(m),
        })
        .map(|s| s.expect("serializable record") + "\n")
        .collect();
    export_dataset(&input, opts, contexts, None, ledger)
}

pub struct ExportPaths<'a> {
    pub out: &'a Path,
    pub quarantine: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
}

pub fn write_outcome(outcome: &ExportOutcome, paths: &ExportPaths) -> io::Result<()> {
    let body: String = outcome.lines.iter().map(|l| format!("{l}\n")).collect();
    fsio::atomic_write(paths.out, body.as_bytes())?;
    if let Some(q) = paths.quarantine {
        fsio::write_jsonl(q, &outcome.quarantine)?;
    }
    if let Some(m) = paths.manifest {
        fsio::write_json(m, &outcome.manifest)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::Provenance;

    fn qa(id: &str, q: &str, a: &str, qtype: QType) -> QAPair {
        QAPair {
            qa_id: id.into(),
            segment_id: "d#0".into(),
            question: q.into(),
            answer: a.into(),
            qtype,
            reasoning: (qtype == QType::Implicit).then(|| "Step one. Step two.".to_string()),
            provenance: Provenance::Generated,
        }
    }

    fn mcq(correct: usize) -> MCQItem {
        let mut options = vec!["w".to_string(), "x".into(), "y".into()];
        options.insert(correct, "right".into());
        MCQItem {
            qa_id: "d#0:q0".into(),
            stem: "Which?".into(),
            options,
            correct_index: correct,
            nuanced_index: if correct == 0 { 1 } else { 0 },
            rng_seed_used: 7,
        }
    }

    fn ctx() -> HashMap<String, String> {
        HashMap::from([("d#0".to_string(), "Passage text.".to_string())])
    }

    #[test]
    fn qa_cot_implicit_output() {
        let item = ExportItem::Qa(qa("d#0:q0", "Why?", "Because.", QType::Implicit));
        let v = render(&item, &ExportOptions::new(Format::QaCot), &ctx()).unwrap();
        assert_eq!(v["output"], "Step one. Step two.\n\nAnswer: Because.");
        assert_eq!(v["input"], "");
        let plain = render(&item, &ExportOptions::new(Format::QaPlain), &ctx()).unwrap();
        assert_eq!(plain["output"], "Because.");
    }

    #[test]
    fn key_order_is_stable() {
        let item = ExportItem::Qa(qa("d#0:q0", "Who?", "Ann", QType::Explicit));
        let opts = ExportOptions {
            include_context: true,
            ..ExportOptions::new(Format::QaCot)
        };
        let s = serde_json::to_string(&render(&item, &opts, &ctx()).unwrap()).unwrap();
        assert_eq!(s, r#"{"instruction":"Who?","input":"Passage text.","output":"Ann"}"#);
    }

    #[test]
    fn mcq_letter() {
        let v = render(&ExportItem::Mcq(mcq(2)), &ExportOptions::new(Format::Mcq), &ctx()).unwrap();
        assert_eq!(v["answer_letter"], "C");
        assert_eq!(v["options"][2], "right");
    }

    #[test]
    fn empty_dataset() {
        let ledger = Ledger::new();
        let out = export_dataset("", &ExportOptions::new(Format::QaCot), &ctx(), None, &ledger).unwrap();
        assert!(out.lines.is_empty());
        assert_eq!(out.manifest.n_input, 0);
        assert!(out.manifest.conserves());
    }

    #[test]
    fn dedup_rules() {
        let a = qa("1", "What is it?", "A cat", QType::Explicit);
        let (k, r) = dedup(&[a.clone(), qa("2", "What is it?", "A cat", QType::Explicit)]);
        assert_eq!((k.len(), r), (1, vec![("2".to_string(), "1".to_string())]));
        let (k, _) = dedup(&[a.clone(), qa("2", "What is it?", "A dog", QType::Explicit)]);
        assert_eq!(k.len(), 2);
        let (k, _) = dedup(&[a, qa("2", "  what IS  it ", "a cat.", QType::Explicit)]);
        assert_eq!(k.len(), 1);
    }

    #[test]
    fn conservation_with_repair_quarantine_dedup() {
        let good = serde_json::to_string(&qa("d#0:q0", "Who?", "Ann", QType::Explicit)).unwrap();
        let dup = serde_json::to_string(&qa("d#0:q1", "who", "ann", QType::Explicit)).unwrap();
        let trailing = serde_json::to_string(&qa("d#0:q2", "Why?", "Rain", QType::Implicit))
            .unwrap()
            .replace("}", ",}");
        let fenced = format!(
            "```json {}```",
            serde_json::to_string(&qa("d#0:q3", "When?", "May", QType::Explicit)).unwrap()
        );
        let input = format!("{good}\n{dup}\n\n{trailing}\nnot a record at all\n{fenced}\n");
        let ledger = Ledger::new();
        let out = export_dataset(&input, &ExportOptions::new(Format::QaCot), &ctx(), None, &ledger).unwrap();
        let m = &out.manifest;
        assert_eq!((m.n_input, m.n_exported, m.n_quarantined, m.n_deduped), (5, 3, 1, 1));
        assert!(m.conserves());
        assert_eq!(m.n_repaired_mechanical, 2);
        assert_eq!(out.quarantine[0].line, 5);
        assert_eq!(out.quarantine[0].raw, "not a record at all");
        assert_eq!(ledger.count("deduplicated"), 1);
        assert_eq!(ledger.count("quarantined"), 1);
        for l in &out.lines {
            validate_record(l, Format::QaCot).unwrap();
        }
    }

    #[test]
    fn missing_context_is_quarantined() {
        let mut p = qa("x#9:q0", "Who?", "Ann", QType::Explicit);
        p.segment_id = "x#9".into();
        let opts = ExportOptions {
            include_context: true,
            ..ExportOptions::new(Format::QaPlain)
        };
        let out = export_items(&[ExportItem::Qa(p)], &opts, &ctx(), &Ledger::new()).unwrap();
        assert_eq!(out.manifest.n_quarantined, 1);
        assert!(out.manifest.conserves());
    }

    #[test]
    fn kind_mismatch() {
        let line = serde_json::to_string(&mcq(1)).unwrap();
        let err = export_dataset(&line, &ExportOptions::new(Format::QaCot), &ctx(), None, &Ledger::new()).unwrap_err();
        assert!(matches!(err, ExportError::KindMismatch { line: 1, .. }));
        let line = serde_json::to_string(&qa("a", "b", "c", QType::Explicit)).unwrap();
        assert!(export_dataset(&line, &ExportOptions::new(Format::Mcq), &ctx(), None, &Ledger::new()).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let items: Vec<ExportItem> = (0..5)
            .map(|i| ExportItem::Qa(qa(&format!("d#0:q{i}"), &format!("Q{i}?"), "A", QType::Implicit)))
            .collect();
        let a = export_items(&items, &ExportOptions::new(Format::QaCot), &ctx(), &Ledger::new()).unwrap();
        let b = export_items(&items, &ExportOptions::new(Format::QaCot), &ctx(), &Ledger::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn files_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = export_items(&[ExportItem::Mcq(mcq(0))], &ExportOptions::new(Format::Mcq), &ctx(), &Ledger::new())
            .unwrap();
        let p = dir.path().join("sft.jsonl");
        let m = dir.path().join("manifest.json");
        let q = dir.path().join("bad.jsonl");
        write_outcome(&out, &ExportPaths { out: &p, quarantine: Some(&q), manifest: Some(&m) }).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"stem\":\"Which?\",\"options\":[\"right\",\"w\",\"x\",\"y\"],\"answer_letter\":\"A\"}\n");
        assert_eq!(std::fs::read_to_string(&q).unwrap(), "");
        let man: ExportManifest = fsio::read_json(&m).unwrap();
        assert_eq!(man.n_exported, 1);
    }
}
