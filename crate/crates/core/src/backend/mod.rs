//! Chat-completion backends.
//!
//! [`ChatBackend`] is the single-request primitive implemented by the HTTP
//! client and the mock. [`Client`] wraps a backend with the run-level policy:
//! an admission limiter capping in-flight requests at `max_parallel`,
//! exponential-backoff retries for transient failures, and ledger entries
//! for every call.

mod http;
mod limiter;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ledger::{Ledger, LedgerEvent};

pub use http::{HttpBackend, HttpResponse, HttpTransport, ReqwestTransport};
pub use limiter::{Limiter, Permit};
pub use mock::{load_script, MockBackend};

pub const ENV_API_BASE: &str = "QASYNTH_API_BASE";
pub const ENV_API_KEY: &str = "QASYNTH_API_KEY";
pub const ENV_MODEL: &str = "QASYNTH_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 2048,
            stop_sequences: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatPrompt {
    pub system: String,
    pub user: String,
    pub params: SamplingParams,
    /// Template id (`name/version`); recorded in the ledger, never sent.
    pub template: String,
}

impl ChatPrompt {
    pub fn new(system: impl Into<String>, user: impl Into<String>, params: SamplingParams) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            params,
            template: String::new(),
        }
    }

    pub fn with_template(mut self, id: &str) -> Self {
        self.template = id.to_string();
        self
    }

    /// Hex SHA-256 over the system and user text; keys scripted mock replies.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0x1f]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), usage: None }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error: HTTP {status}")]
    Server { status: u16 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted reply for prompt {hash}")]
    NoScriptedReply { hash: String },
    #[error("all {attempts} attempts failed; last error: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout | BackendError::RateLimited { .. } | BackendError::Server { .. } | BackendError::Transport(_)
        )
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &ChatPrompt) -> Result<Completion, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, prompt: &ChatPrompt) -> Result<Completion, BackendError> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    const MAX_BACKOFF: Duration = Duration::from_secs(30);

    pub fn delay(&self, retry: u32, hint: Option<Duration>) -> Duration {
        let exp = self.backoff_base.saturating_mul(1u32 << retry.min(16));
        exp.max(hint.unwrap_or_default()).min(Self::MAX_BACKOFF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model_name: String,
    pub max_parallel: usize,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:11434/v1".into(),
            api_key: None,
            model_name: "qwen3:8b".into(),
            max_parallel: 4,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("invalid backend config: {0}")]
pub struct InvalidBackendConfig(pub String);

impl BackendConfig {
    /// Defaults overridden by `QASYNTH_API_BASE`, `QASYNTH_API_KEY` and
    /// `QASYNTH_MODEL` when set.
    pub fn from_env() -> Self {
        Self::default().with_env()
    }

    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var(ENV_API_BASE) {
            self.base_url = v;
        }
        if let Ok(v) = std::env::var(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            self.model_name = v;
        }
        self
    }

    pub fn validate(&self) -> Result<(), InvalidBackendConfig> {
        if self.max_parallel < 1 {
            return Err(InvalidBackendConfig("max_parallel must be >= 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(InvalidBackendConfig("retry.max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Shareable client enforcing the concurrency and retry policy of a
/// [`BackendConfig`] over any [`ChatBackend`].
#[derive(Clone)]
pub struct Client {
    backend: Arc<dyn ChatBackend>,
    config: BackendConfig,
    limiter: Arc<Limiter>,
    ledger: Arc<Ledger>,
}

impl Client {
    pub fn new(backend: Arc<dyn ChatBackend>, config: BackendConfig, ledger: Arc<Ledger>) -> Self {
        let limiter = Arc::new(Limiter::new(config.max_parallel.max(1)));
        Self {
            backend,
            config,
            limiter,
            ledger,
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn limiter(&self) -> &Limiter {
        &self.limiter
    }

    pub fn complete(&self, prompt: &ChatPrompt) -> Result<String, BackendError> {
        let started = Instant::now();
        let max_attempts = self.config.retry.max_attempts.max(1);
        let mut attempt = 0;
        let outcome = loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.complete(prompt)
            };
            match result {
                Ok(c) => break Ok(c),
                Err(e) if e.is_retryable() && attempt < max_attempts => {
                    let hint = match &e {
                        BackendError::RateLimited { retry_after } => *retry_after,
                        _ => None,
                    };
                    thread::sleep(self.config.retry.delay(attempt - 1, hint));
                }
                Err(e) if e.is_retryable() => {
                    break Err(BackendError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => break Err(e),
            }
        };

        let usage = outcome.as_ref().ok().and_then(|c| c.usage);
        self.ledger.record(LedgerEvent::BackendCall {
            template: prompt.template.clone(),
            attempts: attempt,
            retries: attempt - 1,
            latency_ms: started.elapsed().as_millis() as u64,
            prompt_tokens: usage.map(|u| u.prompt_tokens),
            completion_tokens: usage.map(|u| u.completion_tokens),
            ok: outcome.is_ok(),
            error: outcome.as_ref().err().map(ToString::to_string),
        });
        outcome.map(|c| c.text)
    }

    /// Complete every prompt, at most `max_parallel` in flight. Result `i`
    /// belongs to prompt `i`; failures are reported per item.
    pub fn complete_batch(&self, prompts: &[ChatPrompt]) -> Vec<(usize, Result<String, BackendError>)> {
        fan_out(prompts, self.config.max_parallel, |p| self.complete(p))
            .into_iter()
            .enumerate()
            .collect()
    }

    /// Run `f` over `items` on up to `max_parallel` worker threads, returning
    /// results in input order.
    pub fn fan_out<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        fan_out(items, self.config.max_parallel, f)
    }
}

/// Ordered parallel map over a fixed pool of scoped threads.
pub fn fan_out<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done: Vec<Vec<(usize, R)>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every index produced")).collect()
}
