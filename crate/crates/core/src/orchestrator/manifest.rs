use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::export::ExportManifest;
use crate::ingest::TOKENIZER_NAME;
use crate::prompts;
use crate::quality_control::QcCounters;

use super::{PipelineConfig, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCounts {
    pub n_input: usize,
    pub n_exported: usize,
    pub n_quarantined: usize,
    pub n_deduped: usize,
}

impl From<&ExportManifest> for ExportCounts {
    fn from(m: &ExportManifest) -> Self {
        Self {
            n_input: m.n_input,
            n_exported: m.n_exported,
            n_quarantined: m.n_quarantined,
            n_deduped: m.n_deduped,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunCounters {
    pub documents: usize,
    pub skipped_inputs: usize,
    pub segments: usize,
    pub pairs_generated: usize,
    pub generation_failed_segments: usize,
    pub qc: Option<QcCounters>,
    pub mcq_items: usize,
    pub qa_only: usize,
    pub composed: usize,
    pub exports: BTreeMap<String, ExportCounts>,
    /// Item-level losses written to the ledger, per stage.
    pub ledgered_losses: BTreeMap<Stage, usize>,
}

impl RunCounters {
    pub fn losses(&self) -> usize {
        self.ledgered_losses.values().sum::<usize>() + self.skipped_inputs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub tokenizer: String,
    pub stage_status: BTreeMap<Stage, StageStatus>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<Stage, String>,
    pub seeds: BTreeMap<String, u64>,
    pub template_versions: Vec<String>,
    pub counters: RunCounters,
    pub timing_ms: BTreeMap<Stage, u64>,
}

impl RunManifest {
    pub fn new(cfg: &PipelineConfig, enabled: &[Stage]) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("run".to_string(), cfg.run.seed);
        seeds.insert("compose".to_string(), cfg.compose_seed());
        for stage in [Stage::Generate, Stage::Qc, Stage::Distract, Stage::Export] {
            let b = cfg.backend_for(stage);
            if b.is_mock() && b.mock_script.is_none() {
                seeds.insert(format!("mock.{stage}"), b.mock_seed);
            }
        }
        Self {
            run_id: cfg.run_id(),
            config_hash: cfg.hash(),
            tokenizer: TOKENIZER_NAME.to_string(),
            stage_status: enabled.iter().map(|s| (*s, StageStatus::Pending)).collect(),
            failures: BTreeMap::new(),
            seeds,
            template_versions: prompts::ALL.iter().map(|t| t.id.to_string()).collect(),
            counters: RunCounters::default(),
            timing_ms: BTreeMap::new(),
        }
    }

    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.stage_status.get(&stage).copied()
    }

    pub fn all_done(&self) -> bool {
        self.stage_status.values().all(|s| *s == StageStatus::Done)
    }

    /// Stage ordering and per-stage conservation laws. Returns every
    /// violation found.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut gap = None;
        for (stage, status) in &self.stage_status {
            match (status, gap) {
                (StageStatus::Done, Some(prev)) => out.push(format!("{stage} is Done after unfinished {prev}")),
                (StageStatus::Done, None) => {}
                (_, None) => gap = Some(*stage),
                _ => {}
            }
        }
        let done = |s| self.status(s) == Some(StageStatus::Done);
        let c = &self.counters;
        if done(Stage::Qc) {
            match &c.qc {
                Some(q) => {
                    if q.pairs_in != c.pairs_generated {
                        out.push(format!("qc saw {} pairs but generate wrote {}", q.pairs_in, c.pairs_generated));
                    }
                    if !q.reconciles() {
                        out.push(format!("qc counters do not reconcile: {q:?}"));
                    }
                    if done(Stage::Distract) && c.mcq_items + c.qa_only != q.pairs_out {
                        out.push(format!(
                            "distract: {} items + {} qa-only != {} qc survivors",
                            c.mcq_items, c.qa_only, q.pairs_out
                        ));
                    }
                    if done(Stage::Compose) && c.composed > q.pairs_out {
                        out.push(format!("compose: {} pairs drawn from a pool of {}", c.composed, q.pairs_out));
                    }
                }
                None => out.push("qc is Done but has no counters".into()),
            }
        }
        for (format, e) in &c.exports {
            if e.n_exported + e.n_quarantined + e.n_deduped != e.n_input {
                out.push(format!("export {format}: counts do not conserve: {e:?}"));
            }
        }
        out
    }
}
