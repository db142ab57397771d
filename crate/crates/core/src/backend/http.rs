//! OpenAI-compatible chat-completions client (`POST <base_url>/chat/completions`).
//! Ollama and LM Studio both serve this protocol.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendConfig, BackendError, ChatBackend, ChatPrompt, Completion, Usage};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<Duration>,
}

/// Minimal JSON-over-HTTP transport so the protocol handling can be tested
/// against scripted responses.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpResponse, BackendError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpResponse, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = bearer {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        Ok(HttpResponse { status, body, retry_after })
    }
}

pub struct HttpBackend<T: HttpTransport = ReqwestTransport> {
    transport: T,
    endpoint: String,
    api_key: Option<String>,
    model: String,
}

impl HttpBackend<ReqwestTransport> {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        Ok(Self::with_transport(cfg, ReqwestTransport::new(cfg.timeout)?))
    }
}

impl<T: HttpTransport> HttpBackend<T> {
    pub fn with_transport(cfg: &BackendConfig, transport: T) -> Self {
        Self {
            transport,
            endpoint: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            api_key: cfg.api_key.clone(),
            model: cfg.model_name.clone(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn request_body(&self, prompt: &ChatPrompt) -> Value {
        let mut messages = Vec::new();
        if !prompt.system.is_empty() {
            messages.push(json!({"role": "system", "content": prompt.system}));
        }
        messages.push(json!({"role": "user", "content": prompt.user}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": prompt.params.temperature,
            "max_tokens": prompt.params.max_output_tokens,
            "stream": false,
        });
        if !prompt.params.stop_sequences.is_empty() {
            body["stop"] = json!(prompt.params.stop_sequences);
        }
        body
    }
}

pub(crate) fn parse_chat_response(body: &str) -> Result<Completion, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?;
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(Completion {
        text: content.to_string(),
        usage,
    })
}

impl<T: HttpTransport> ChatBackend for HttpBackend<T> {
    fn complete(&self, prompt: &ChatPrompt) -> Result<Completion, BackendError> {
        let resp = self
            .transport
            .post_json(&self.endpoint, self.api_key.as_deref(), &self.request_body(prompt))?;
        match resp.status {
            200..=299 => parse_chat_response(&resp.body),
            429 => Err(BackendError::RateLimited {
                retry_after: resp.retry_after,
            }),
            408 | 504 => Err(BackendError::Timeout),
            500..=599 => Err(BackendError::Server { status: resp.status }),
            status => Err(BackendError::Http {
                status,
                body: resp.body.chars().take(500).collect(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Client, RetryPolicy, SamplingParams};
    use crate::ledger::{Ledger, LedgerEvent};
    use std::sync::{Arc, Mutex};

    struct Scripted {
        responses: Mutex<Vec<HttpResponse>>,
        seen: Mutex<Vec<(String, Option<String>, Value)>>,
    }

    impl HttpTransport for Scripted {
        fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpResponse, BackendError> {
            self.seen.lock().unwrap().push((url.into(), bearer.map(String::from), body.clone()));
            Ok(self.responses.lock().unwrap().remove(0))
        }
    }

    fn ok_body(text: &str) -> String {
        json!({
            "id": "x",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3, "total_tokens": 15}
        })
        .to_string()
    }

    fn resp(status: u16, body: &str) -> HttpResponse {
        HttpResponse {
            status,
            body: body.into(),
            retry_after: None,
        }
    }

    fn cfg() -> BackendConfig {
        BackendConfig {
            base_url: "http://host:1234/v1/".into(),
            api_key: Some("sk-test".into()),
            model_name: "m".into(),
            max_parallel: 1,
            retry: RetryPolicy {
                max_attempts: 4,
                backoff_base: Duration::from_millis(1),
            },
            ..BackendConfig::default()
        }
    }

    #[test]
    fn request_shape_and_auth() {
        let transport = Scripted {
            responses: Mutex::new(vec![resp(200, &ok_body("hello"))]),
            seen: Mutex::new(vec![]),
        };
        let be = HttpBackend::with_transport(&cfg(), transport);
        let mut p = ChatPrompt::new("S", "U", SamplingParams::default());
        p.params.stop_sequences = vec!["END".into()];
        let c = be.complete(&p).unwrap();
        assert_eq!(c.text, "hello");
        assert_eq!(c.usage, Some(Usage { prompt_tokens: 12, completion_tokens: 3 }));
        let seen = be.transport.seen.lock().unwrap();
        let (url, bearer, body) = &seen[0];
        assert_eq!(url, "http://host:1234/v1/chat/completions");
        assert_eq!(bearer.as_deref(), Some("sk-test"));
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "U");
        assert_eq!(body["stop"][0], "END");
    }

    #[test]
    fn http_429_twice_then_200() {
        let transport = Scripted {
            responses: Mutex::new(vec![resp(429, ""), resp(429, ""), resp(200, &ok_body("done"))]),
            seen: Mutex::new(vec![]),
        };
        let be = Arc::new(HttpBackend::with_transport(&cfg(), transport));
        let ledger = Arc::new(Ledger::new());
        let client = Client::new(be.clone(), cfg(), ledger.clone());
        let p = ChatPrompt::new("S", "U", SamplingParams::default());
        assert_eq!(client.complete(&p).unwrap(), "done");
        assert_eq!(be.transport.seen.lock().unwrap().len(), 3);
        assert!(matches!(
            ledger.snapshot()[0],
            LedgerEvent::BackendCall { attempts: 3, retries: 2, ok: true, prompt_tokens: Some(12), .. }
        ));
    }

    #[test]
    fn status_mapping() {
        let cases = [
            (500, "boom"),
            (503, ""),
            (408, ""),
            (401, "unauthorized"),
            (200, "not json"),
            (200, "{\"choices\": []}"),
        ];
        let transport = Scripted {
            responses: Mutex::new(cases.iter().map(|(s, b)| resp(*s, b)).collect()),
            seen: Mutex::new(vec![]),
        };
        let be = HttpBackend::with_transport(&cfg(), transport);
        let p = ChatPrompt::new("", "U", SamplingParams::default());
        assert_eq!(be.complete(&p).unwrap_err(), BackendError::Server { status: 500 });
        assert_eq!(be.complete(&p).unwrap_err(), BackendError::Server { status: 503 });
        assert_eq!(be.complete(&p).unwrap_err(), BackendError::Timeout);
        assert!(matches!(be.complete(&p).unwrap_err(), BackendError::Http { status: 401, .. }));
        assert!(matches!(be.complete(&p).unwrap_err(), BackendError::MalformedResponse(_)));
        assert!(matches!(be.complete(&p).unwrap_err(), BackendError::MalformedResponse(_)));
        // no system message when the system prompt is empty
        let body = be.request_body(&p);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    }
}
