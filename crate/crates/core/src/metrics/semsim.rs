//! Embedding similarity. Cosine in [-1, 1] is mapped to [0, 100] by
//! `(cos + 1) / 2 * 100`.

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backend::{HttpTransport, ReqwestTransport};

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, String>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_to_percent(cos: f64) -> f64 {
    ((cos + 1.0) / 2.0 * 100.0).clamp(0.0, 100.0)
}

pub fn semsim(pred: &str, gold: &str, embedder: &dyn Embedder) -> Result<f64, String> {
    let v = embedder.embed(&[pred, gold])?;
    if v.len() != 2 {
        return Err(format!("embedder returned {} vectors for 2 texts", v.len()));
    }
    cosine(&v[0], &v[1])
        .map(cosine_to_percent)
        .ok_or_else(|| "embeddings are empty, zero or of different sizes".to_string())
}

/// Offline embedder: hashed bag of lowercase word tokens.
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for tok in super::text::rouge_tokens(t) {
                    let h = Sha256::digest(tok.as_bytes());
                    let idx = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
                    v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                }
                v
            })
            .collect())
    }
}

/// OpenAI-compatible `POST <base_url>/embeddings`.
pub struct HttpEmbedder<T: HttpTransport = ReqwestTransport> {
    transport: T,
    endpoint: String,
    api_key: Option<String>,
    model: String,
}

impl HttpEmbedder<ReqwestTransport> {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: std::time::Duration) -> Result<Self, String> {
        let transport = ReqwestTransport::new(timeout).map_err(|e| e.to_string())?;
        Ok(Self::with_transport(base_url, model, api_key, transport))
    }
}

impl<T: HttpTransport> HttpEmbedder<T> {
    pub fn with_transport(base_url: &str, model: &str, api_key: Option<String>, transport: T) -> Self {
        Self {
            transport,
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            api_key,
            model: model.into(),
        }
    }
}

impl<T: HttpTransport> Embedder for HttpEmbedder<T> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        let body = json!({"model": self.model, "input": texts});
        let resp = self
            .transport
            .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            .map_err(|e| e.to_string())?;
        if !(200..300).contains(&resp.status) {
            return Err(format!("embedding endpoint returned HTTP {}", resp.status));
        }
        let v: Value = serde_json::from_str(&resp.body).map_err(|e| format!("invalid JSON: {e}"))?;
        let mut data: Vec<&Value> = v["data"].as_array().ok_or("missing data array")?.iter().collect();
        data.sort_by_key(|d| d["index"].as_u64().unwrap_or(0));
        data.iter()
            .map(|d| {
                d["embedding"]
                    .as_array()
                    .and_then(|e| e.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| "embedding is not a number array".to_string())
            })
            .collect()
    }
}
