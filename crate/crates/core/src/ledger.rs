//! Run ledger: an append-only log of item-level events (backend calls,
//! shortfalls, deletions, regenerations, quarantines) written next to the
//! stage artifacts.

use std::fs::OpenOptions;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEvent {
    BackendCall {
        template: String,
        attempts: u32,
        retries: u32,
        latency_ms: u64,
        prompt_tokens: Option<u64>,
        completion_tokens: Option<u64>,
        ok: bool,
        error: Option<String>,
    },
    TemplateBatch {
        stage: String,
        template: String,
        items: usize,
    },
    GenerationRetry {
        segment_id: String,
        attempt: u32,
        reason: String,
    },
    GenerationShortfall {
        segment_id: String,
        explicit_expected: usize,
        explicit_got: usize,
        implicit_expected: usize,
        implicit_got: usize,
    },
    GenerationExcess {
        segment_id: String,
        dropped: usize,
    },
    GenerationExhausted {
        segment_id: String,
        reason: String,
    },
    DuplicateAnswers {
        segment_id: String,
        duplicates: usize,
    },
    HallucinationWarning {
        qa_id: String,
    },
    AdjudicationExhausted {
        qa_id: String,
        reason: String,
    },
    BackfillFailed {
        qa_id: String,
        reason: String,
    },
    FloorRegenerated {
        segment_id: String,
        qa_id: String,
    },
    FloorUnsatisfied {
        segment_id: String,
        dropped_pairs: usize,
    },
    DistractorRetry {
        qa_id: String,
        reason: String,
    },
    DistractorExhausted {
        qa_id: String,
        reason: String,
    },
    Quarantined {
        line: usize,
        reason: String,
    },
    Repaired {
        line: usize,
        tier: String,
    },
    Deduplicated {
        qa_id: String,
        duplicate_of: String,
    },
}

impl LedgerEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            LedgerEvent::BackendCall { .. } => "backend_call",
            LedgerEvent::TemplateBatch { .. } => "template_batch",
            LedgerEvent::GenerationRetry { .. } => "generation_retry",
            LedgerEvent::GenerationShortfall { .. } => "generation_shortfall",
            LedgerEvent::GenerationExcess { .. } => "generation_excess",
            LedgerEvent::GenerationExhausted { .. } => "generation_exhausted",
            LedgerEvent::DuplicateAnswers { .. } => "duplicate_answers",
            LedgerEvent::HallucinationWarning { .. } => "hallucination_warning",
            LedgerEvent::AdjudicationExhausted { .. } => "adjudication_exhausted",
            LedgerEvent::BackfillFailed { .. } => "backfill_failed",
            LedgerEvent::FloorRegenerated { .. } => "floor_regenerated",
            LedgerEvent::FloorUnsatisfied { .. } => "floor_unsatisfied",
            LedgerEvent::DistractorRetry { .. } => "distractor_retry",
            LedgerEvent::DistractorExhausted { .. } => "distractor_exhausted",
            LedgerEvent::Quarantined { .. } => "quarantined",
            LedgerEvent::Repaired { .. } => "repaired",
            LedgerEvent::Deduplicated { .. } => "deduplicated",
        }
    }

    /// Events that mean an item was lost or altered rather than passed through.
    pub fn is_item_loss(&self) -> bool {
        matches!(
            self,
            LedgerEvent::GenerationShortfall { .. }
                | LedgerEvent::GenerationExhausted { .. }
                | LedgerEvent::AdjudicationExhausted { .. }
                | LedgerEvent::BackfillFailed { .. }
                | LedgerEvent::FloorUnsatisfied { .. }
                | LedgerEvent::DistractorExhausted { .. }
                | LedgerEvent::Quarantined { .. }
        )
    }
}

#[derive(Debug, Default)]
pub struct Ledger {
    events: Mutex<Vec<LedgerEvent>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event: LedgerEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn snapshot(&self) -> Vec<LedgerEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn drain(&self) -> Vec<LedgerEvent> {
        std::mem::take(&mut *self.events.lock().unwrap())
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.lock().unwrap().iter().filter(|e| e.kind() == kind).count()
    }

    /// Append all buffered events to a JSONL file and clear the buffer.
    pub fn flush_to(&self, path: &Path) -> io::Result<usize> {
        let events = self.drain();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = BufWriter::new(file);
        for e in &events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(events.len())
    }
}
