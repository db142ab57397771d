use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use qasynth::backend::Client;
use qasynth::compose::{mix, CompositionConfig};
use qasynth::counterfactual::{run_counterfactuals, DistractorSettings, MCQItem, N_OPTIONS};
use qasynth::export::{export_dataset, write_outcome, ExportOptions, ExportPaths, Format, ANSWER_LETTERS};
use qasynth::fsio;
use qasynth::generation::{generate_for_segment, GenerationError, GenerationSettings, GenerationSpec, QAPair};
use qasynth::ingest::{load_corpus, Segment};
use qasynth::ledger::Ledger;
use qasynth::metrics::{align, audit_counts, parse_keyed_jsonl, score, Embedder, HashingEmbedder, HttpEmbedder};
use qasynth::orchestrator::{
    build_client, expand_inputs, run, segment_corpus, BackendSection, ExitStatus, IngestSection, PipelineConfig,
    RunOptions, Stage,
};
use qasynth::quality_control::{run_qc, QcSettings};

#[derive(Parser)]
#[command(name = "qasynth", version, about = "Turn documents into QA, QA-CoT and multiple-choice SFT datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load documents and split them into token-budgeted segments.
    Ingest(IngestArgs),
    /// Generate explicit and implicit QA pairs per segment.
    Generate(GenerateArgs),
    /// Adjudicate pairs and enforce the one-explicit-pair floor.
    Qc(QcArgs),
    /// Build four-option multiple-choice items from QA pairs.
    Distract(DistractArgs),
    /// Sample a training mix from the QA pool.
    Compose(ComposeArgs),
    /// Validate, repair, dedup and render records for fine-tuning.
    Export(ExportArgs),
    /// Score predictions against references.
    Score(ScoreArgs),
    /// Chi-square test of answer positions against uniform.
    Audit(AuditArgs),
    /// Run the configured pipeline, resuming a previous run if present.
    Run(RunArgs),
}

#[derive(Args, Clone, Default)]
struct BackendArgs {
    /// Use the deterministic offline mock instead of an HTTP endpoint.
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    mock_seed: Option<u64>,
    /// Scripted mock replies keyed by prompt hash (implies --mock).
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// OpenAI-compatible base URL, e.g. http://localhost:11434/v1.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Append ledger events to this JSONL file.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

impl BackendArgs {
    fn apply(&self, b: &mut BackendSection) {
        if self.mock || self.mock_script.is_some() {
            b.provider = "mock".into();
        }
        if let Some(s) = self.mock_seed {
            b.mock_seed = s;
        }
        if let Some(p) = &self.mock_script {
            b.mock_script = Some(p.clone());
        }
        if let Some(u) = &self.base_url {
            b.base_url = u.clone();
        }
        if let Some(m) = &self.model {
            b.model_name = m.clone();
        }
        if let Some(n) = self.max_parallel {
            b.max_parallel = n;
        }
        if let Some(t) = self.timeout_ms {
            b.timeout_ms = t;
        }
        if let Some(a) = self.max_attempts {
            b.max_attempts = a;
        }
    }

    fn client(&self) -> Result<Client, Failure> {
        let mut section = BackendSection::default();
        self.apply(&mut section);
        build_client(&section, Arc::new(Ledger::new())).map_err(|e| Failure::config(anyhow!(e)))
    }

    /// Flush the ledger and classify the outcome by its item-loss events.
    fn finish(&self, client: &Client) -> Result<ExitStatus, Failure> {
        let losses = client.ledger().snapshot().iter().filter(|e| e.is_item_loss()).count();
        match &self.ledger {
            Some(p) => {
                client.ledger().flush_to(p).map_err(|e| Failure::stage(anyhow!(e)))?;
            }
            None => {
                client.ledger().drain();
            }
        }
        if losses > 0 {
            tracing::warn!("{losses} items were dropped or altered; see the ledger");
            Ok(ExitStatus::Partial)
        } else {
            Ok(ExitStatus::Success)
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Input files or glob patterns.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<String>,
    /// `text` or `jsonl`.
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long, default_value = "text")]
    text_field: String,
    #[arg(long)]
    id_field: Option<String>,
    /// Skip unreadable or malformed inputs instead of aborting.
    #[arg(long)]
    skip_bad: bool,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    /// `budget`, `blank_line`, `heading` or `regex`.
    #[arg(long, default_value = "budget")]
    segmenter: String,
    #[arg(long)]
    delimiter: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long, default_value_t = 2)]
    n_explicit: usize,
    #[arg(long, default_value_t = 1)]
    n_implicit: usize,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct QcArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    verdicts: Option<PathBuf>,
    #[arg(long)]
    floor_retries: Option<u32>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct DistractArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the appraisal and replacement rounds.
    #[arg(long)]
    no_appraisal: bool,
    #[arg(long)]
    out: PathBuf,
    /// Pairs left without an acceptable distractor set.
    #[arg(long)]
    qa_only: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    implicit_frac: f64,
    #[arg(long)]
    explicit_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    stratify: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// `qa_plain`, `qa_cot` or `mcq`.
    #[arg(long)]
    format: String,
    #[arg(long)]
    include_context: bool,
    /// Segments file supplying context text.
    #[arg(long)]
    segments: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quarantine: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Send records that fail mechanical repair to the backend once.
    #[arg(long)]
    llm_repair: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "pred")]
    predictions: PathBuf,
    #[arg(long = "ref")]
    references: PathBuf,
    /// OpenAI-compatible embeddings base URL for SemSim.
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long, default_value = "text-embedding-3-small")]
    embed_model: String,
    /// Offline hashed bag-of-words embedder for SemSim.
    #[arg(long, conflicts_with = "embed_endpoint")]
    hashing_embedder: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Stage-3 items or exported mcq records.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Stop after this stage; a later run resumes from the next one.
    #[arg(long)]
    stop_after: Option<String>,
    #[arg(long)]
    no_appraisal: bool,
    /// Only validate the configuration.
    #[arg(long)]
    check: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

struct Failure {
    status: ExitStatus,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Self {
            status: ExitStatus::ConfigError,
            error,
        }
    }

    fn stage(error: anyhow::Error) -> Self {
        Self {
            status: ExitStatus::StageFailure,
            error,
        }
    }
}

trait OrStage<T> {
    fn or_stage(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrStage<T> for Result<T, E> {
    fn or_stage(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::stage(e.into().context(what.to_string())))
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    fsio::read_jsonl(path).with_context(|| format!("reading {}", path.display())).or_stage("input")
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    fsio::write_jsonl(path, items).with_context(|| format!("writing {}", path.display())).or_stage("output")
}

fn cmd_ingest(a: IngestArgs) -> Result<ExitStatus, Failure> {
    let section = IngestSection {
        inputs: a.inputs,
        format: a.format,
        text_field: a.text_field,
        id_field: a.id_field,
        skip_bad_inputs: a.skip_bad,
        max_tokens: a.max_tokens,
        segmenter: a.segmenter,
        delimiter: a.delimiter,
    };
    let mut cfg = PipelineConfig::default();
    cfg.ingest = section.clone();
    cfg.run.stages = vec![Stage::Ingest.as_str().into()];
    let errors = qasynth::orchestrator::validate_config(&cfg);
    if !errors.is_empty() {
        let msg = errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(Failure::config(anyhow!(msg)));
    }
    let paths = expand_inputs(&section.inputs).map_err(|e| Failure::stage(anyhow!(e)))?;
    let corpus = load_corpus(&paths, &section.load_options()).or_stage("ingest")?;
    for d in &corpus.diagnostics {
        tracing::warn!("skipped {}: {}", d.path.display(), d.message);
    }
    let segments = segment_corpus(&corpus, &section).map_err(|e| Failure::stage(anyhow!(e)))?;
    write_jsonl(&a.out, &segments)?;
    eprintln!("{} documents, {} segments", corpus.documents.len(), segments.len());
    Ok(if corpus.diagnostics.is_empty() {
        ExitStatus::Success
    } else {
        ExitStatus::Partial
    })
}

fn cmd_generate(a: GenerateArgs) -> Result<ExitStatus, Failure> {
    let spec = GenerationSpec::new(a.n_explicit, a.n_implicit).map_err(|e| Failure::config(e.into()))?;
    let mut settings = GenerationSettings::default();
    if let Some(t) = a.temperature {
        settings.temperature = t;
    }
    let client = a.backend.client()?;
    let segments: Vec<Segment> = read_jsonl(&a.segments)?;
    let results = client.fan_out(&segments, |s| generate_for_segment(s, &spec, &settings, &client));
    let mut pairs = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(p) => pairs.extend(p),
            Err(GenerationError::Exhausted { .. }) => failed += 1,
            Err(e) => return Err(Failure::stage(e.into())),
        }
    }
    if failed > 0 && failed == segments.len() {
        return Err(Failure::stage(anyhow!("generation failed for all {failed} segments")));
    }
    write_jsonl(&a.out, &pairs)?;
    eprintln!("{} pairs from {} segments ({failed} failed)", pairs.len(), segments.len());
    a.backend.finish(&client)
}

fn cmd_qc(a: QcArgs) -> Result<ExitStatus, Failure> {
    let mut settings = QcSettings::default();
    if let Some(n) = a.floor_retries {
        settings.floor_retries = n;
    }
    let client = a.backend.client()?;
    let segments: Vec<Segment> = read_jsonl(&a.segments)?;
    let pairs: Vec<QAPair> = read_jsonl(&a.pairs)?;
    let out = run_qc(&segments, &pairs, &GenerationSettings::default(), &settings, &client).or_stage("qc")?;
    write_jsonl(&a.out, &out.pairs)?;
    if let Some(v) = &a.verdicts {
        write_jsonl(v, &out.verdicts)?;
    }
    eprintln!("{}", serde_json::to_string(&out.counters).unwrap());
    a.backend.finish(&client)
}

fn cmd_distract(a: DistractArgs) -> Result<ExitStatus, Failure> {
    let settings = DistractorSettings {
        appraisal: !a.no_appraisal,
        ..DistractorSettings::default()
    };
    let client = a.backend.client()?;
    let segments: Vec<Segment> = read_jsonl(&a.segments)?;
    let pairs: Vec<QAPair> = read_jsonl(&a.pairs)?;
    let out = run_counterfactuals(&segments, &pairs, &settings, a.seed, &client).or_stage("distract")?;
    write_jsonl(&a.out, &out.items)?;
    if let Some(p) = &a.qa_only {
        write_jsonl(p, &out.qa_only)?;
    }
    eprintln!("{} items, {} qa-only", out.items.len(), out.qa_only.len());
    a.backend.finish(&client)
}

fn cmd_compose(a: ComposeArgs) -> Result<ExitStatus, Failure> {
    let cfg = CompositionConfig {
        implicit_fraction: a.implicit_frac,
        explicit_fraction: a.explicit_frac,
        seed: a.seed,
        shuffle: a.shuffle,
        stratify: a.stratify,
    };
    cfg.validate().map_err(|e| Failure::config(e.into()))?;
    let pool: Vec<QAPair> = read_jsonl(&a.pool)?;
    let (dataset, report) = mix(&pool, &cfg).or_stage("compose")?;
    write_jsonl(&a.out, &dataset)?;
    let json = serde_json::to_string_pretty(&report).unwrap();
    match &a.report {
        Some(p) => fsio::write_json(p, &report).or_stage("report")?,
        None => println!("{json}"),
    }
    Ok(ExitStatus::Success)
}

fn cmd_export(a: ExportArgs) -> Result<ExitStatus, Failure> {
    let format = Format::parse(&a.format)
        .ok_or_else(|| Failure::config(anyhow!("--format must be one of qa_plain, qa_cot, mcq")))?;
    if a.include_context && a.segments.is_none() && format != Format::Mcq {
        return Err(Failure::config(anyhow!("--include-context needs --segments")));
    }
    let contexts: HashMap<String, String> = match &a.segments {
        Some(p) => read_jsonl::<Segment>(p)?.into_iter().map(|s| (s.segment_id, s.text)).collect(),
        None => HashMap::new(),
    };
    let input = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))
        .or_stage("export")?;
    let client = a.backend.client()?;
    let opts = ExportOptions {
        include_context: a.include_context,
        ..ExportOptions::new(format)
    };
    let repair = a.llm_repair.then_some(&client);
    let outcome = export_dataset(&input, &opts, &contexts, repair, client.ledger()).or_stage("export")?;
    write_outcome(
        &outcome,
        &ExportPaths {
            out: &a.out,
            quarantine: a.quarantine.as_deref(),
            manifest: a.manifest.as_deref(),
        },
    )
    .or_stage("export")?;
    let m = &outcome.manifest;
    eprintln!(
        "{} exported, {} quarantined, {} deduped of {}",
        m.n_exported, m.n_quarantined, m.n_deduped, m.n_input
    );
    let status = a.backend.finish(&client)?;
    Ok(if m.n_quarantined > 0 {
        ExitStatus::Partial
    } else {
        status
    })
}

fn cmd_score(a: ScoreArgs) -> Result<ExitStatus, Failure> {
    let read = |p: &Path| {
        std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .and_then(|t| parse_keyed_jsonl(&t).map_err(|e| anyhow!("{}: {e}", p.display())))
    };
    let preds = read(&a.predictions).or_stage("score")?;
    let refs = read(&a.references).or_stage("score")?;
    let pairs = align(preds, refs).or_stage("score")?;
    let embedder: Option<Box<dyn Embedder>> = if let Some(url) = &a.embed_endpoint {
        let key = std::env::var(qasynth::backend::ENV_API_KEY).ok();
        Some(Box::new(
            HttpEmbedder::new(url, &a.embed_model, key, Duration::from_secs(60))
                .map_err(|e| Failure::config(anyhow!(e)))?,
        ))
    } else if a.hashing_embedder {
        Some(Box::new(HashingEmbedder::default()))
    } else {
        None
    };
    let p: Vec<&str> = pairs.iter().map(|(p, _)| p.as_str()).collect();
    let r: Vec<&str> = pairs.iter().map(|(_, r)| r.as_str()).collect();
    let report = score(&p, &r, embedder.as_deref()).or_stage("score")?;
    match &a.out {
        Some(path) => fsio::write_json(path, &report).or_stage("score")?,
        None => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
    }
    Ok(ExitStatus::Success)
}

fn answer_position(v: &Value) -> Option<usize> {
    if let Some(i) = v.get("correct_index").and_then(Value::as_u64) {
        return Some(i as usize);
    }
    let letter = v.get("answer_letter")?.as_str()?.chars().next()?;
    ANSWER_LETTERS.iter().position(|l| *l == letter)
}

fn cmd_audit(a: AuditArgs) -> Result<ExitStatus, Failure> {
    let text = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))
        .or_stage("audit")?;
    let mut counts = [0u64; N_OPTIONS];
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .with_context(|| format!("line {}", i + 1))
            .or_stage("audit")?;
        if v.get("options").is_some() && v.get("qa_id").is_some() {
            let item: MCQItem = serde_json::from_value(v.clone())
                .with_context(|| format!("line {}", i + 1))
                .or_stage("audit")?;
            item.check().map_err(|e| Failure::stage(anyhow!("line {}: {e}", i + 1)))?;
        }
        let pos = answer_position(&v)
            .filter(|p| *p < N_OPTIONS)
            .ok_or_else(|| Failure::stage(anyhow!("line {}: no answer position", i + 1)))?;
        counts[pos] += 1;
    }
    if counts.iter().sum::<u64>() == 0 {
        return Err(Failure::stage(anyhow!("no items to audit")));
    }
    println!("{}", serde_json::to_string_pretty(&audit_counts(counts)).unwrap());
    Ok(ExitStatus::Success)
}

fn cmd_run(a: RunArgs) -> Result<ExitStatus, Failure> {
    let mut cfg = PipelineConfig::load(&a.config).map_err(|errs| {
        Failure::config(anyhow!(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")))
    })?;
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(id) = &a.run_id {
        cfg.run.run_id = Some(id.clone());
    }
    if let Some(d) = &a.out_dir {
        cfg.run.out_dir = d.clone();
    }
    if a.no_appraisal {
        cfg.distractors.appraisal = false;
    }
    a.backend.apply(&mut cfg.backend);
    let stop_after = match &a.stop_after {
        Some(s) => Some(Stage::parse(s).ok_or_else(|| {
            let valid: Vec<_> = Stage::ALL.iter().map(|s| s.as_str()).collect();
            Failure::config(anyhow!("--stop-after {s:?}: valid stages are {}", valid.join(", ")))
        })?),
        None => None,
    };
    if a.check {
        let errors = qasynth::orchestrator::validate_config(&cfg);
        if errors.is_empty() {
            println!("ok (config hash {})", cfg.hash());
            return Ok(ExitStatus::Success);
        }
        let msg = errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
        return Err(Failure::config(anyhow!(msg)));
    }
    match run(&cfg, &RunOptions { stop_after }) {
        Ok(outcome) => {
            let m = &outcome.manifest;
            eprintln!("run {} in {}", m.run_id, outcome.run_dir.display());
            for (stage, status) in &m.stage_status {
                let ms = m.timing_ms.get(stage).copied().unwrap_or(0);
                eprintln!("  {stage:<9} {status:?} ({ms} ms)");
            }
            for problem in m.check() {
                tracing::warn!("manifest check: {problem}");
            }
            Ok(outcome.exit_status())
        }
        Err(e) => Err(Failure {
            status: e.exit_status(),
            error: e.into(),
        }),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitStatus::ConfigError.code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Qc(a) => cmd_qc(a),
        Command::Distract(a) => cmd_distract(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Export(a) => cmd_export(a),
        Command::Score(a) => cmd_score(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Run(a) => cmd_run(a),
    };
    let status = match result {
        Ok(s) => s,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.status
        }
    };
    ExitCode::from(status.code() as u8)
}
