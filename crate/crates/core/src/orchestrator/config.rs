//! Pipeline configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendConfig, RetryPolicy};
use crate::counterfactual::DistractorSettings;
use crate::export::Format;
use crate::generation::{GenerationSettings, GenerationSpec};
use crate::ingest::{CorpusFormat, DelimiterSpec, LoadOptions, OnError, MIN_SEGMENT_TOKENS};
use crate::quality_control::QcSettings;

use super::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub ingest: IngestSection,
    pub generation: GenerationSection,
    pub qc: QcSettings,
    pub distractors: DistractorSettings,
    pub compose: ComposeSection,
    pub export: ExportSection,
    pub backend: BackendSection,
    pub backends: StageBackends,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            ingest: IngestSection::default(),
            generation: GenerationSection::default(),
            qc: QcSettings::default(),
            distractors: DistractorSettings::default(),
            compose: ComposeSection::default(),
            export: ExportSection::default(),
            backend: BackendSection::default(),
            backends: StageBackends::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Defaults to `run-` plus the first 12 hex digits of the config hash.
    pub run_id: Option<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub stages: Vec<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            run_id: None,
            out_dir: PathBuf::from("runs"),
            seed: 0,
            stages: Stage::ALL.iter().map(|s| s.as_str().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Paths or glob patterns, relative to the config file.
    pub inputs: Vec<String>,
    /// `text` or `jsonl`.
    pub format: String,
    pub text_field: String,
    pub id_field: Option<String>,
    pub skip_bad_inputs: bool,
    pub max_tokens: usize,
    /// `budget`, `blank_line`, `heading` or `regex`.
    pub segmenter: String,
    pub delimiter: Option<String>,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            format: "text".into(),
            text_field: "text".into(),
            id_field: None,
            skip_bad_inputs: false,
            max_tokens: crate::ingest::DEFAULT_MAX_TOKENS,
            segmenter: "budget".into(),
            delimiter: None,
        }
    }
}

impl IngestSection {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            format: if self.format == "jsonl" {
                CorpusFormat::JsonlWithTextField
            } else {
                CorpusFormat::PlainText
            },
            text_field: self.text_field.clone(),
            id_field: self.id_field.clone(),
            on_error: if self.skip_bad_inputs { OnError::Skip } else { OnError::Abort },
        }
    }

    /// `None` selects the budget packer.
    pub fn delimiter_spec(&self) -> Option<DelimiterSpec> {
        match self.segmenter.as_str() {
            "blank_line" => Some(DelimiterSpec::BlankLine),
            "heading" => Some(DelimiterSpec::HeadingRegex),
            "regex" => Some(DelimiterSpec::Custom(self.delimiter.clone().unwrap_or_default())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub n_explicit: usize,
    pub n_implicit: usize,
    pub require_role_transformation: bool,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub retries: u32,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let s = GenerationSettings::default();
        let spec = GenerationSpec::default();
        Self {
            n_explicit: spec.n_explicit,
            n_implicit: spec.n_implicit,
            require_role_transformation: spec.require_role_transformation,
            temperature: s.temperature,
            max_output_tokens: s.max_output_tokens,
            retries: s.retries,
        }
    }
}

impl GenerationSection {
    pub fn spec(&self) -> GenerationSpec {
        GenerationSpec {
            n_explicit: self.n_explicit,
            n_implicit: self.n_implicit,
            require_role_transformation: self.require_role_transformation,
        }
    }

    pub fn settings(&self) -> GenerationSettings {
        GenerationSettings {
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            retries: self.retries,
        }
    }
}

/// Per-stage endpoint overrides of the shared `[backend]` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBackends {
    pub generate: Option<BackendSection>,
    pub qc: Option<BackendSection>,
    pub distract: Option<BackendSection>,
    pub export: Option<BackendSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeSection {
    pub implicit_fraction: f64,
    pub explicit_fraction: f64,
    /// Defaults to `run.seed`.
    pub seed: Option<u64>,
    pub shuffle: bool,
    pub stratify: bool,
}

impl Default for ComposeSection {
    fn default() -> Self {
        Self {
            implicit_fraction: 1.0,
            explicit_fraction: 1.0,
            seed: None,
            shuffle: false,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub formats: Vec<String>,
    pub include_context: bool,
    /// Send records that fail mechanical repair to the backend once.
    pub llm_repair: bool,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            formats: vec![Format::QaCot.as_str().into(), Format::Mcq.as_str().into()],
            include_context: false,
            llm_repair: true,
        }
    }
}

impl ExportSection {
    pub fn parsed_formats(&self) -> Vec<Format> {
        self.formats.iter().filter_map(|f| Format::parse(f)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// `http` or `mock`.
    pub provider: String,
    pub mock_seed: u64,
    /// Scripted replies keyed by prompt hash; generative mock when absent.
    pub mock_script: Option<PathBuf>,
    pub base_url: String,
    pub model_name: String,
    pub max_parallel: usize,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let b = BackendConfig::default();
        Self {
            provider: "http".into(),
            mock_seed: 0,
            mock_script: None,
            base_url: b.base_url,
            model_name: b.model_name,
            max_parallel: b.max_parallel,
            timeout_ms: b.timeout.as_millis() as u64,
            max_attempts: b.retry.max_attempts,
            backoff_ms: b.retry.backoff_base.as_millis() as u64,
        }
    }
}

impl BackendSection {
    pub fn is_mock(&self) -> bool {
        self.provider == "mock"
    }

    /// Endpoint settings; the API key and any unset fields come from the
    /// environment.
    pub fn backend_config(&self) -> BackendConfig {
        let mut cfg = BackendConfig {
            base_url: self.base_url.clone(),
            api_key: None,
            model_name: self.model_name.clone(),
            max_parallel: self.max_parallel,
            timeout: Duration::from_millis(self.timeout_ms),
            retry: RetryPolicy {
                max_attempts: self.max_attempts,
                backoff_base: Duration::from_millis(self.backoff_ms),
            },
        };
        let defaults = BackendSection::default();
        let env = BackendConfig::default().with_env();
        if self.base_url == defaults.base_url {
            cfg.base_url = env.base_url;
        }
        if self.model_name == defaults.model_name {
            cfg.model_name = env.model_name;
        }
        cfg.api_key = env.api_key;
        cfg
    }
}

/// One violated constraint, named by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub constraint: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.constraint)
    }
}

fn err(path: impl Into<String>, constraint: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        constraint: constraint.into(),
    }
}

const FORMATS: [&str; 2] = ["text", "jsonl"];
const SEGMENTERS: [&str; 4] = ["budget", "blank_line", "heading", "regex"];
const PROVIDERS: [&str; 2] = ["http", "mock"];

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, Vec<ConfigError>> {
        toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("toml@{}..{}", s.start, s.end)).unwrap_or_else(|| "toml".into());
            vec![err(path, e.message().trim().to_string())]
        })
    }

    /// Parse a config file. Relative input patterns, output dir and mock
    /// script paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, Vec<ConfigError>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![err(path.display().to_string(), e.to_string())])?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        for input in &mut self.ingest.inputs {
            if !Path::new(input.as_str()).is_absolute() {
                *input = base.join(&*input).to_string_lossy().into_owned();
            }
        }
        self.run.out_dir = join(&self.run.out_dir);
        for b in self.backends_mut() {
            if let Some(s) = &b.mock_script {
                b.mock_script = Some(join(s));
            }
        }
    }

    fn backends_mut(&mut self) -> Vec<&mut BackendSection> {
        let mut v = vec![&mut self.backend];
        v.extend(self.backends.generate.as_mut());
        v.extend(self.backends.qc.as_mut());
        v.extend(self.backends.distract.as_mut());
        v.extend(self.backends.export.as_mut());
        v
    }

    /// Enabled stages in pipeline order.
    pub fn enabled_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| self.run.stages.iter().any(|n| n == s.as_str()))
            .collect()
    }

    pub fn compose_seed(&self) -> u64 {
        self.compose.seed.unwrap_or(self.run.seed)
    }

    /// Backend for a stage: its own section, else the shared one.
    pub fn backend_for(&self, stage: Stage) -> &BackendSection {
        let own = match stage {
            Stage::Generate => self.backends.generate.as_ref(),
            Stage::Qc => self.backends.qc.as_ref(),
            Stage::Distract => self.backends.distract.as_ref(),
            Stage::Export => self.backends.export.as_ref(),
            _ => None,
        };
        own.unwrap_or(&self.backend)
    }

    /// SHA-256 over the canonical JSON form. Secrets are never serialized.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.run_id = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn run_id(&self) -> String {
        self.run.run_id.clone().unwrap_or_else(|| format!("run-{}", &self.hash()[..12]))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(self.run_id())
    }
}

fn check_temperature(path: &str, t: f64, out: &mut Vec<ConfigError>) {
    if !(0.0..=2.0).contains(&t) {
        out.push(err(path, "must be within [0, 2]"));
    }
}

fn check_backend(path: &str, b: &BackendSection, out: &mut Vec<ConfigError>) {
    if !PROVIDERS.contains(&b.provider.as_str()) {
        out.push(err(format!("{path}.provider"), format!("must be one of {}", PROVIDERS.join(", "))));
    }
    if b.max_parallel < 1 {
        out.push(err(format!("{path}.max_parallel"), "must be >= 1"));
    }
    if b.max_attempts < 1 {
        out.push(err(format!("{path}.max_attempts"), "must be >= 1"));
    }
    if b.timeout_ms == 0 {
        out.push(err(format!("{path}.timeout_ms"), "must be >= 1"));
    }
    if !b.is_mock() && b.base_url.trim().is_empty() {
        out.push(err(format!("{path}.base_url"), "must not be empty for the http provider"));
    }
}

/// Every violated constraint, each naming its config path. Empty means valid.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<ConfigError> {
    let mut out = Vec::new();
    let valid_stages: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();

    for name in &cfg.run.stages {
        if Stage::parse(name).is_none() {
            out.push(err(
                "run.stages",
                format!("unknown stage {name:?}; valid stages are {}", valid_stages.join(", ")),
            ));
        }
    }
    let enabled = cfg.enabled_stages();
    if enabled.is_empty() && out.is_empty() {
        out.push(err("run.stages", "must enable at least one stage"));
    }
    for s in &enabled {
        for dep in s.requires() {
            if !enabled.contains(dep) {
                out.push(err("run.stages", format!("{} requires {}", s.as_str(), dep.as_str())));
            }
        }
    }

    let ing = &cfg.ingest;
    if ing.max_tokens < MIN_SEGMENT_TOKENS {
        out.push(err("ingest.max_tokens", format!("must be >= {MIN_SEGMENT_TOKENS}")));
    }
    if enabled.contains(&Stage::Ingest) && ing.inputs.is_empty() {
        out.push(err("ingest.inputs", "must list at least one path or glob pattern"));
    }
    if !FORMATS.contains(&ing.format.as_str()) {
        out.push(err("ingest.format", format!("must be one of {}", FORMATS.join(", "))));
    }
    if ing.text_field.is_empty() {
        out.push(err("ingest.text_field", "must not be empty"));
    }
    if !SEGMENTERS.contains(&ing.segmenter.as_str()) {
        out.push(err("ingest.segmenter", format!("must be one of {}", SEGMENTERS.join(", "))));
    }
    if ing.segmenter == "regex" {
        match &ing.delimiter {
            None => out.push(err("ingest.delimiter", "is required when segmenter = \"regex\"")),
            Some(p) => {
                if let Err(e) = Regex::new(p) {
                    out.push(err("ingest.delimiter", format!("must be a valid regex: {e}")));
                }
            }
        }
    }

    let g = &cfg.generation;
    if g.n_explicit + g.n_implicit == 0 {
        out.push(err("generation.n_explicit", "n_explicit + n_implicit must be >= 1"));
    }
    check_temperature("generation.temperature", g.temperature, &mut out);
    if g.max_output_tokens == 0 {
        out.push(err("generation.max_output_tokens", "must be >= 1"));
    }

    check_temperature("qc.temperature", cfg.qc.temperature, &mut out);
    if cfg.qc.max_output_tokens == 0 {
        out.push(err("qc.max_output_tokens", "must be >= 1"));
    }
    check_temperature("distractors.temperature", cfg.distractors.temperature, &mut out);
    if cfg.distractors.max_output_tokens == 0 {
        out.push(err("distractors.max_output_tokens", "must be >= 1"));
    }

    let c = &cfg.compose;
    for (path, f) in [
        ("compose.implicit_fraction", c.implicit_fraction),
        ("compose.explicit_fraction", c.explicit_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            out.push(err(path, "must be within [0, 1]"));
        }
    }
    if enabled.contains(&Stage::Compose) && c.implicit_fraction == 0.0 && c.explicit_fraction == 0.0 {
        out.push(err(
            "compose.implicit_fraction",
            "implicit_fraction and explicit_fraction must not both be 0 while compose is enabled",
        ));
    }

    let valid_formats = [Format::QaPlain, Format::QaCot, Format::Mcq].map(Format::as_str);
    for f in &cfg.export.formats {
        if Format::parse(f).is_none() {
            out.push(err(
                "export.formats",
                format!("unknown format {f:?}; valid formats are {}", valid_formats.join(", ")),
            ));
        }
    }
    if enabled.contains(&Stage::Export) {
        if cfg.export.formats.is_empty() {
            out.push(err("export.formats", "must list at least one format"));
        }
        if cfg.export.parsed_formats().contains(&Format::Mcq) && !enabled.contains(&Stage::Distract) {
            out.push(err("export.formats", "mcq requires the distract stage"));
        }
    }

    check_backend("backend", &cfg.backend, &mut out);
    for (path, b) in [
        ("backends.generate", &cfg.backends.generate),
        ("backends.qc", &cfg.backends.qc),
        ("backends.distract", &cfg.backends.distract),
        ("backends.export", &cfg.backends.export),
    ] {
        if let Some(b) = b {
            check_backend(path, b, &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_inputs() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.ingest.inputs = vec!["doc.txt".into()];
        c
    }

    fn paths(errs: &[ConfigError]) -> Vec<&str> {
        errs.iter().map(|e| e.path.as_str()).collect()
    }

    #[test]
    fn default_config_is_valid() {
        assert_eq!(validate_config(&with_inputs()), vec![]);
    }

    #[test]
    fn budget_below_floor_is_named() {
        let mut c = with_inputs();
        c.ingest.max_tokens = 4;
        let errs = validate_config(&c);
        assert_eq!(paths(&errs), vec!["ingest.max_tokens"]);
        assert!(errs[0].constraint.contains(">= 16"));
    }

    #[test]
    fn unknown_stage_lists_valid_ones() {
        let mut c = with_inputs();
        c.run.stages.push("train".into());
        let errs = validate_config(&c);
        assert_eq!(paths(&errs), vec!["run.stages"]);
        assert!(errs[0].constraint.contains("ingest, generate, qc, distract, compose, export"));
    }

    #[test]
    fn zero_fractions_rejected_only_with_compose() {
        let mut c = with_inputs();
        c.compose.implicit_fraction = 0.0;
        c.compose.explicit_fraction = 0.0;
        assert_eq!(paths(&validate_config(&c)), vec!["compose.implicit_fraction"]);
        c.run.stages = vec!["ingest".into(), "generate".into(), "qc".into()];
        assert_eq!(validate_config(&c), vec![]);
    }

    #[test]
    fn stage_dependencies_and_formats() {
        let mut c = with_inputs();
        c.run.stages.retain(|s| s != "distract");
        assert_eq!(paths(&validate_config(&c)), vec!["export.formats"]);
        c.export.formats = vec!["qa_cot".into(), "alpaca".into()];
        let errs = validate_config(&c);
        assert!(errs[0].constraint.contains("qa_plain, qa_cot, mcq"));
        c.run.stages = vec!["generate".into()];
        assert!(paths(&validate_config(&c)).contains(&"run.stages"));
    }

    #[test]
    fn regex_segmenter_needs_valid_delimiter() {
        let mut c = with_inputs();
        c.ingest.segmenter = "regex".into();
        assert_eq!(paths(&validate_config(&c)), vec!["ingest.delimiter"]);
        c.ingest.delimiter = Some("(".into());
        assert_eq!(paths(&validate_config(&c)), vec!["ingest.delimiter"]);
        c.ingest.delimiter = Some("^---$".into());
        assert_eq!(validate_config(&c), vec![]);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = r#"
            [run]
            seed = 7
            [ingest]
            inputs = ["a.txt"]
            max_tokens = 128
            [generation]
            n_explicit = 3
            n_implicit = 3
            [qc]
            floor_retries = 1
            [distractors]
            appraisal = false
            [backend]
            provider = "mock"
            mock_seed = 3
        "#;
        let c = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(c.generation.spec(), GenerationSpec::COVID_QA);
        assert_eq!(c.qc.floor_retries, 1);
        assert!(!c.distractors.appraisal);
        assert!(c.backend.is_mock());
        assert_eq!(c.compose_seed(), 7);
        let errs = PipelineConfig::from_toml("[ingest]\nmax_tokenz = 3\n").unwrap_err();
        assert!(errs[0].constraint.contains("max_tokenz"));
    }

    #[test]
    fn hash_tracks_content_not_run_id() {
        let a = with_inputs();
        let mut b = a.clone();
        b.run.run_id = Some("named".into());
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert!(a.run_id().starts_with("run-"));
        assert_eq!(a.run_id().len(), 16);
    }

    #[test]
    fn stage_backend_falls_back_to_shared() {
        let mut c = with_inputs();
        c.backends.qc = Some(BackendSection {
            model_name: "judge".into(),
            ..BackendSection::default()
        });
        assert_eq!(c.backend_for(Stage::Qc).model_name, "judge");
        assert_eq!(c.backend_for(Stage::Generate), &c.backend);
    }
}
