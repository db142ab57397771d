//! Run manager: stage sequencing over JSONL files, resumable manifests and
//! exit-status classification.
//!
//! Each stage reads its inputs from the run directory and writes its outputs
//! atomically before the manifest marks it `Done`. A rerun with the same
//! run id skips stages that are `Done` and whose outputs are present; once a
//! stage executes, every later stage executes too.

mod config;
mod manifest;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{load_script, ChatBackend, Client, HttpBackend, MockBackend};
use crate::compose::{mix, CompositionConfig};
use crate::counterfactual::{run_counterfactuals, MCQItem};
use crate::export::{export_dataset, write_outcome, ExportOptions, ExportPaths, Format};
use crate::fsio;
use crate::generation::{generate_for_segment, GenerationError, QAPair};
use crate::ingest::{load_corpus, segment_by_budget, segment_structural, Corpus, Segment};
use crate::ledger::Ledger;
use crate::quality_control::run_qc;

pub use config::{
    validate_config, BackendSection, ComposeSection, ConfigError, ExportSection, GenerationSection, IngestSection,
    PipelineConfig, RunSection, StageBackends,
};
pub use manifest::{ExportCounts, RunCounters, RunManifest, StageStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Generate,
    Qc,
    Distract,
    Compose,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Generate,
        Stage::Qc,
        Stage::Distract,
        Stage::Compose,
        Stage::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::Qc => "qc",
            Stage::Distract => "distract",
            Stage::Compose => "compose",
            Stage::Export => "export",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Stages whose outputs this stage reads.
    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Generate => &[Stage::Ingest],
            Stage::Qc => &[Stage::Ingest, Stage::Generate],
            Stage::Distract => &[Stage::Ingest, Stage::Qc],
            Stage::Compose => &[Stage::Qc],
            Stage::Export => &[Stage::Ingest, Stage::Compose],
        }
    }

    /// The primary artifact, relative to the run directory.
    pub fn output(self) -> &'static str {
        match self {
            Stage::Ingest => files::SEGMENTS,
            Stage::Generate => files::STAGE1,
            Stage::Qc => files::STAGE2,
            Stage::Distract => files::STAGE3,
            Stage::Compose => files::TRAIN,
            Stage::Export => files::EXPORT_DONE,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// File names inside a run directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const CONFIG: &str = "config.json";
    pub const LEDGER: &str = "ledger.jsonl";
    pub const SEGMENTS: &str = "segments.jsonl";
    pub const STAGE1: &str = "stage1.jsonl";
    pub const STAGE2: &str = "stage2.jsonl";
    pub const VERDICTS: &str = "qc_verdicts.jsonl";
    pub const STAGE3: &str = "stage3.jsonl";
    pub const QA_ONLY: &str = "stage3_qa_only.jsonl";
    pub const APPRAISALS: &str = "appraisals.jsonl";
    pub const TRAIN: &str = "train.jsonl";
    pub const COMPOSE_REPORT: &str = "compose_report.json";
    /// Index of the export files written for each format.
    pub const EXPORT_DONE: &str = "exports.json";

    pub fn export(format: &str) -> String {
        format!("export.{format}.jsonl")
    }

    pub fn quarantine(format: &str) -> String {
        format!("export.{format}.quarantine.jsonl")
    }

    pub fn export_manifest(format: &str) -> String {
        format!("export.{format}.manifest.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    ConfigError,
    StageFailure,
    /// Artifacts produced, but some items were quarantined or ledgered.
    Partial,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::ConfigError => 1,
            ExitStatus::StageFailure => 2,
            ExitStatus::Partial => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<ConfigError>),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("run directory i/o: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            RunError::Config(_) => ExitStatus::ConfigError,
            RunError::Stage { .. } | RunError::Io(_) => ExitStatus::StageFailure,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    /// Stages executed by this invocation, in order.
    pub executed: Vec<Stage>,
    pub stopped_after: Option<Stage>,
}

impl RunOutcome {
    pub fn exit_status(&self) -> ExitStatus {
        if self.manifest.counters.losses() > 0 {
            ExitStatus::Partial
        } else {
            ExitStatus::Success
        }
    }
}

/// One client per model-calling stage, sharing a ledger.
#[derive(Clone)]
pub struct StageClients {
    pub ledger: Arc<Ledger>,
    pub generate: Client,
    pub qc: Client,
    pub distract: Client,
    pub export: Client,
}

impl StageClients {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, RunError> {
        let ledger = Arc::new(Ledger::new());
        let make = |stage: Stage| {
            build_client(cfg.backend_for(stage), ledger.clone()).map_err(|e| {
                let path = if cfg.backend_for(stage) == &cfg.backend {
                    "backend".to_string()
                } else {
                    format!("backends.{stage}")
                };
                RunError::Config(vec![ConfigError { path, constraint: e }])
            })
        };
        Ok(Self {
            generate: make(Stage::Generate)?,
            qc: make(Stage::Qc)?,
            distract: make(Stage::Distract)?,
            export: make(Stage::Export)?,
            ledger,
        })
    }

    /// Every stage talks to the same backend.
    pub fn uniform(backend: Arc<dyn ChatBackend>, section: &BackendSection) -> Self {
        let ledger = Arc::new(Ledger::new());
        let client = Client::new(backend, section.backend_config(), ledger.clone());
        Self {
            ledger,
            generate: client.clone(),
            qc: client.clone(),
            distract: client.clone(),
            export: client,
        }
    }
}

pub fn build_client(section: &BackendSection, ledger: Arc<Ledger>) -> Result<Client, String> {
    let cfg = section.backend_config();
    let backend: Arc<dyn ChatBackend> = if section.is_mock() {
        match &section.mock_script {
            Some(path) => Arc::new(MockBackend::scripted(
                load_script(path).map_err(|e| format!("cannot load mock script {}: {e}", path.display()))?,
            )),
            None => Arc::new(MockBackend::generative(section.mock_seed)),
        }
    } else {
        Arc::new(HttpBackend::new(&cfg).map_err(|e| e.to_string())?)
    };
    Ok(Client::new(backend, cfg, ledger))
}

/// Expand paths and glob patterns, each pattern's matches sorted.
pub fn expand_inputs(patterns: &[String]) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for p in patterns {
        if p.contains(['*', '?', '[']) {
            let mut hits: Vec<PathBuf> = glob::glob(p)
                .map_err(|e| format!("bad pattern {p:?}: {e}"))?
                .filter_map(Result::ok)
                .filter(|p| p.is_file())
                .collect();
            if hits.is_empty() {
                return Err(format!("pattern {p:?} matched no files"));
            }
            hits.sort();
            out.extend(hits);
        } else {
            out.push(PathBuf::from(p));
        }
    }
    Ok(out)
}

pub fn segment_corpus(corpus: &Corpus, ingest: &IngestSection) -> Result<Vec<Segment>, String> {
    let mut segments = Vec::new();
    for doc in &corpus.documents {
        let segs = match ingest.delimiter_spec() {
            Some(d) => segment_structural(doc, &d, ingest.max_tokens),
            None => segment_by_budget(doc, ingest.max_tokens),
        }
        .map_err(|e| e.to_string())?;
        segments.extend(segs);
    }
    Ok(segments)
}

/// Ids of the composed dataset select and order the stage-3 items.
pub fn select_items(items: &[MCQItem], dataset: &[QAPair]) -> Vec<MCQItem> {
    let by_id: HashMap<&str, &MCQItem> = items.iter().map(|i| (i.qa_id.as_str(), i)).collect();
    dataset.iter().filter_map(|q| by_id.get(q.qa_id.as_str()).map(|i| (*i).clone())).collect()
}

fn fail(stage: Stage) -> impl Fn(String) -> RunError {
    move |message| RunError::Stage { stage, message }
}

fn io_fail(stage: Stage) -> impl Fn(io::Error) -> RunError {
    move |e| RunError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Validate, build clients from the config and run.
pub fn run(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let errors = validate_config(cfg);
    if !errors.is_empty() {
        return Err(RunError::Config(errors));
    }
    let clients = StageClients::from_config(cfg)?;
    run_with(cfg, opts, &clients)
}

pub fn run_with(cfg: &PipelineConfig, opts: &RunOptions, clients: &StageClients) -> Result<RunOutcome, RunError> {
    let errors = validate_config(cfg);
    if !errors.is_empty() {
        return Err(RunError::Config(errors));
    }
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    let manifest_path = run_dir.join(files::MANIFEST);
    let enabled = cfg.enabled_stages();
    let hash = cfg.hash();

    let mut manifest = if manifest_path.exists() {
        let m: RunManifest = fsio::read_json(&manifest_path)?;
        if m.config_hash != hash {
            return Err(RunError::Config(vec![ConfigError {
                path: "run.run_id".into(),
                constraint: format!(
                    "run {} was started with config {}; this config hashes to {}. Use a new run_id",
                    m.run_id,
                    &m.config_hash[..12],
                    &hash[..12]
                ),
            }]));
        }
        m
    } else {
        RunManifest::new(cfg, &enabled)
    };
    fsio::write_json(&run_dir.join(files::CONFIG), cfg)?;
    fsio::write_json(&manifest_path, &manifest)?;

    let mut executed = Vec::new();
    let mut stopped_after = None;
    let mut dirty = false;
    for stage in enabled {
        let done = manifest.status(stage) == Some(StageStatus::Done) && run_dir.join(stage.output()).exists();
        if done && !dirty {
            tracing::info!(%stage, "already done, skipping");
        } else {
            dirty = true;
            tracing::info!(%stage, "running");
            let started = Instant::now();
            let result = execute(stage, cfg, &run_dir, clients, &mut manifest.counters);
            let events = clients.ledger.snapshot();
            let losses = events.iter().filter(|e| e.is_item_loss()).count();
            clients.ledger.flush_to(&run_dir.join(files::LEDGER))?;
            manifest.counters.ledgered_losses.insert(stage, losses);
            manifest.timing_ms.insert(stage, started.elapsed().as_millis() as u64);
            match result {
                Ok(()) => {
                    manifest.stage_status.insert(stage, StageStatus::Done);
                    manifest.failures.remove(&stage);
                    fsio::write_json(&manifest_path, &manifest)?;
                    executed.push(stage);
                }
                Err(e) => {
                    manifest.stage_status.insert(stage, StageStatus::Failed);
                    manifest.failures.insert(stage, e.to_string());
                    fsio::write_json(&manifest_path, &manifest)?;
                    return Err(e);
                }
            }
        }
        if opts.stop_after == Some(stage) {
            stopped_after = Some(stage);
            break;
        }
    }
    Ok(RunOutcome {
        run_dir,
        manifest,
        executed,
        stopped_after,
    })
}

fn execute(
    stage: Stage,
    cfg: &PipelineConfig,
    dir: &Path,
    clients: &StageClients,
    counters: &mut RunCounters,
) -> Result<(), RunError> {
    let io_err = io_fail(stage);
    let read_segments = || fsio::read_jsonl::<Segment>(&dir.join(files::SEGMENTS)).map_err(&io_err);
    match stage {
        Stage::Ingest => {
            let paths = expand_inputs(&cfg.ingest.inputs).map_err(fail(stage))?;
            let corpus = load_corpus(&paths, &cfg.ingest.load_options()).map_err(|e| fail(stage)(e.to_string()))?;
            for d in &corpus.diagnostics {
                tracing::warn!("skipped {}: {}", d.path.display(), d.message);
            }
            let segments = segment_corpus(&corpus, &cfg.ingest).map_err(fail(stage))?;
            if segments.is_empty() {
                return Err(fail(stage)("no segments produced".into()));
            }
            counters.documents = corpus.documents.len();
            counters.skipped_inputs = corpus.diagnostics.len();
            counters.segments = segments.len();
            fsio::write_jsonl(&dir.join(files::SEGMENTS), &segments).map_err(&io_err)?;
        }
        Stage::Generate => {
            let segments = read_segments()?;
            let spec = cfg.generation.spec();
            let settings = cfg.generation.settings();
            let client = &clients.generate;
            let results = client.fan_out(&segments, |s| generate_for_segment(s, &spec, &settings, client));
            let mut pairs = Vec::new();
            let mut failed = 0;
            for r in results {
                match r {
                    Ok(p) => pairs.extend(p),
                    Err(GenerationError::Exhausted { .. }) => failed += 1,
                    Err(e) => return Err(fail(stage)(e.to_string())),
                }
            }
            if failed == segments.len() {
                return Err(fail(stage)(format!("generation failed for all {failed} segments")));
            }
            counters.pairs_generated = pairs.len();
            counters.generation_failed_segments = failed;
            fsio::write_jsonl(&dir.join(files::STAGE1), &pairs).map_err(&io_err)?;
        }
        Stage::Qc => {
            let segments = read_segments()?;
            let pairs: Vec<QAPair> = fsio::read_jsonl(&dir.join(files::STAGE1)).map_err(&io_err)?;
            let out = run_qc(&segments, &pairs, &cfg.generation.settings(), &cfg.qc, &clients.qc)
                .map_err(|e| fail(stage)(e.to_string()))?;
            if !out.counters.reconciles() {
                return Err(fail(stage)(format!("QC counters do not reconcile: {:?}", out.counters)));
            }
            fsio::write_jsonl(&dir.join(files::VERDICTS), &out.verdicts).map_err(&io_err)?;
            fsio::write_jsonl(&dir.join(files::STAGE2), &out.pairs).map_err(&io_err)?;
            counters.qc = Some(out.counters);
        }
        Stage::Distract => {
            let segments = read_segments()?;
            let pairs: Vec<QAPair> = fsio::read_jsonl(&dir.join(files::STAGE2)).map_err(&io_err)?;
            let out = run_counterfactuals(&segments, &pairs, &cfg.distractors, cfg.run.seed, &clients.distract)
                .map_err(|e| fail(stage)(e.to_string()))?;
            fsio::write_jsonl(&dir.join(files::APPRAISALS), &out.appraisals).map_err(&io_err)?;
            fsio::write_jsonl(&dir.join(files::QA_ONLY), &out.qa_only).map_err(&io_err)?;
            fsio::write_jsonl(&dir.join(files::STAGE3), &out.items).map_err(&io_err)?;
            counters.mcq_items = out.items.len();
            counters.qa_only = out.qa_only.len();
        }
        Stage::Compose => {
            let pool: Vec<QAPair> = fsio::read_jsonl(&dir.join(files::STAGE2)).map_err(&io_err)?;
            let c = &cfg.compose;
            let mix_cfg = CompositionConfig {
                implicit_fraction: c.implicit_fraction,
                explicit_fraction: c.explicit_fraction,
                seed: cfg.compose_seed(),
                shuffle: c.shuffle,
                stratify: c.stratify,
            };
            let (dataset, report) = mix(&pool, &mix_cfg).map_err(|e| fail(stage)(e.to_string()))?;
            fsio::write_json(&dir.join(files::COMPOSE_REPORT), &report).map_err(&io_err)?;
            fsio::write_jsonl(&dir.join(files::TRAIN), &dataset).map_err(&io_err)?;
            counters.composed = dataset.len();
        }
        Stage::Export => {
            let segments = read_segments()?;
            let contexts: HashMap<String, String> =
                segments.into_iter().map(|s| (s.segment_id, s.text)).collect();
            let train_path = dir.join(files::TRAIN);
            let repair_client = cfg.export.llm_repair.then_some(&clients.export);
            let mut seeds = BTreeMap::new();
            seeds.insert("run".to_string(), cfg.run.seed);
            seeds.insert("compose".to_string(), cfg.compose_seed());
            let mut written = Vec::new();
            counters.exports.clear();
            let mut seen = HashSet::new();
            for format in cfg.export.parsed_formats() {
                if !seen.insert(format) {
                    continue;
                }
                let input = match format {
                    Format::Mcq => {
                        let items: Vec<MCQItem> = fsio::read_jsonl(&dir.join(files::STAGE3)).map_err(&io_err)?;
                        let dataset: Vec<QAPair> = fsio::read_jsonl(&train_path).map_err(&io_err)?;
                        fsio::jsonl_string(&select_items(&items, &dataset))
                    }
                    _ => std::fs::read_to_string(&train_path).map_err(&io_err)?,
                };
                let opts = ExportOptions {
                    format,
                    include_context: cfg.export.include_context,
                    config_hash: Some(cfg.hash()),
                    seeds: seeds.clone(),
                };
                let outcome = export_dataset(&input, &opts, &contexts, repair_client, &clients.ledger)
                    .map_err(|e| fail(stage)(e.to_string()))?;
                let name = format.as_str();
                let (out, quarantine, manifest) =
                    (files::export(name), files::quarantine(name), files::export_manifest(name));
                write_outcome(
                    &outcome,
                    &ExportPaths {
                        out: &dir.join(&out),
                        quarantine: Some(&dir.join(&quarantine)),
                        manifest: Some(&dir.join(&manifest)),
                    },
                )
                .map_err(&io_err)?;
                counters.exports.insert(name.to_string(), ExportCounts::from(&outcome.manifest));
                written.push(out);
            }
            fsio::write_json(&dir.join(files::EXPORT_DONE), &written).map_err(&io_err)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()), Some(s));
            assert_eq!(serde_json::to_value(s).unwrap(), s.as_str());
        }
        assert_eq!(Stage::parse("train"), None);
    }

    #[test]
    fn requirements_point_backwards() {
        for s in Stage::ALL {
            assert!(s.requires().iter().all(|d| d < &s));
        }
    }

    #[test]
    fn exit_codes() {
        let codes = [
            ExitStatus::Success,
            ExitStatus::ConfigError,
            ExitStatus::StageFailure,
            ExitStatus::Partial,
        ]
        .map(ExitStatus::code);
        assert_eq!(codes, [0, 1, 2, 3]);
    }

    #[test]
    fn glob_inputs_are_sorted_and_must_match() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.txt", "a.txt", "c.md"] {
            std::fs::write(dir.path().join(name), "x").unwrap();
        }
        let pat = dir.path().join("*.txt").to_string_lossy().into_owned();
        let got = expand_inputs(&[pat]).unwrap();
        let names: Vec<_> = got.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.txt", "b.txt"]);
        let none = dir.path().join("*.json").to_string_lossy().into_owned();
        assert!(expand_inputs(&[none]).is_err());
    }
}
