//! Chat-completions client for OpenAI-compatible endpoints, with retry,
//! jittered exponential backoff, a per-call timeout, and a global
//! in-flight limit. A sibling embeddings client serves as an optional
//! neural backbone behind the retrieval `Embedder` trait.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde_json::json;

use crate::retrieval::{EmbedError, Embedder};

use super::{Decoding, LlmBackend, LlmError, PromptBundle};

pub const API_KEY_ENV: &str = "CALM_TWIN_API_KEY";
pub const BASE_URL_ENV: &str = "CALM_TWIN_BASE_URL";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Endpoint prefix; `/chat/completions` and `/embeddings` are appended.
    pub base_url: String,
    pub model: String,
    pub embed_model: String,
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    /// Retry ceiling: a call makes at most `1 + max_retries` requests.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    /// Upper bound on concurrent requests through one backend value.
    pub max_in_flight: usize,
    /// Ask for `n` samples in one request instead of repeating calls.
    pub use_n_parameter: bool,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            embed_model: "text-embedding-3-small".into(),
            api_key: None,
            timeout_ms: 30_000,
            max_retries: 5,
            backoff_base_ms: 250,
            backoff_cap_ms: 8_000,
            max_in_flight: 4,
            use_n_parameter: true,
        }
    }

    /// Reads `CALM_TWIN_BASE_URL` (required) and `CALM_TWIN_API_KEY`
    /// (optional) from the environment.
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let base_url = std::env::var(BASE_URL_ENV).map_err(|_| LlmError::Backend {
            detail: format!("{BASE_URL_ENV} is not set"),
        })?;
        let mut cfg = Self::new(base_url, model);
        cfg.api_key = std::env::var(API_KEY_ENV).ok();
        Ok(cfg)
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }
}

/// Minimal counting semaphore; permits release on drop.
struct Semaphore {
    available: Mutex<usize>,
    signal: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(count: usize) -> Self {
        Self {
            available: Mutex::new(count.max(1)),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.signal.wait(available).unwrap();
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.signal.notify_one();
    }
}

fn build_agent(cfg: &RemoteConfig) -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .build()
}

fn is_retryable(error: &ureq::Error) -> bool {
    match error {
        ureq::Error::Status(code, _) => *code == 429 || *code >= 500,
        ureq::Error::Transport(_) => true,
    }
}

fn backoff_delay(cfg: &RemoteConfig, attempt: u32) -> Duration {
    let exp = cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(16));
    let capped = exp.min(cfg.backoff_cap_ms);
    let jitter: f64 = rand::thread_rng().gen_range(0.0..0.5);
    Duration::from_millis((capped as f64 * (1.0 + jitter)) as u64)
}

fn post_with_retries(
    agent: &ureq::Agent,
    cfg: &RemoteConfig,
    url: &str,
    body: &serde_json::Value,
) -> Result<serde_json::Value, LlmError> {
    let mut attempt: u32 = 0;
    loop {
        let mut request = agent.post(url);
        if let Some(key) = &cfg.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body.clone()) {
            Ok(response) => {
                return response.into_json().map_err(|e| LlmError::MalformedResponse {
                    detail: format!("response is not JSON: {e}"),
                })
            }
            Err(error) if is_retryable(&error) && attempt < cfg.max_retries => {
                std::thread::sleep(backoff_delay(cfg, attempt));
                attempt += 1;
            }
            Err(error) => {
                return Err(LlmError::Transport {
                    detail: error.to_string(),
                    attempts: attempt + 1,
                })
            }
        }
    }
}

/// Chat-completions backend. Greedy decoding maps to temperature 0;
/// ensembles use the `n` parameter or repeated calls per
/// [`RemoteConfig::use_n_parameter`].
pub struct RemoteChatBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    gate: Semaphore,
}

impl RemoteChatBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = build_agent(&cfg);
        let gate = Semaphore::new(cfg.max_in_flight);
        Self { cfg, agent, gate }
    }

    fn request_body(&self, bundle: &PromptBundle, n: usize) -> serde_json::Value {
        let mut messages = Vec::new();
        if !bundle.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": bundle.system_text}));
        }
        messages.push(json!({"role": "user", "content": bundle.user_text}));
        let temperature = match bundle.params.decoding {
            Decoding::Greedy => 0.0,
            Decoding::Beam(_) => bundle.params.temperature,
        };
        json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": temperature,
            "n": n,
            "max_tokens": bundle.params.max_tokens,
        })
    }

    fn extract_choices(value: &serde_json::Value) -> Result<Vec<String>, LlmError> {
        let choices = value
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| LlmError::MalformedResponse {
                detail: "missing 'choices' array".into(),
            })?;
        if choices.is_empty() {
            return Err(LlmError::MalformedResponse {
                detail: "'choices' is empty".into(),
            });
        }
        choices
            .iter()
            .map(|choice| {
                choice
                    .pointer("/message/content")
                    .and_then(|c| c.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| LlmError::MalformedResponse {
                        detail: "choice lacks message.content".into(),
                    })
            })
            .collect()
    }
}

impl LlmBackend for RemoteChatBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<Vec<String>, LlmError> {
        let _permit = self.gate.acquire();
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let wanted = bundle.params.n_samples.max(1);
        if self.cfg.use_n_parameter {
            let body = self.request_body(bundle, wanted);
            let value = post_with_retries(&self.agent, &self.cfg, &url, &body)?;
            Self::extract_choices(&value)
        } else {
            let mut texts = Vec::with_capacity(wanted);
            for _ in 0..wanted {
                let body = self.request_body(bundle, 1);
                let value = post_with_retries(&self.agent, &self.cfg, &url, &body)?;
                texts.push(Self::extract_choices(&value)?.remove(0));
            }
            Ok(texts)
        }
    }

    fn name(&self) -> &'static str {
        "remote-chat"
    }
}

/// Batched embeddings client. Vectors are L2-normalized on receipt and
/// must share one dimension across the batch.
pub struct EmbeddingsClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl EmbeddingsClient {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = build_agent(&cfg);
        Self { cfg, agent }
    }

    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({"model": self.cfg.embed_model, "input": texts});
        let value = post_with_retries(&self.agent, &self.cfg, &url, &body)?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| LlmError::MalformedResponse {
                detail: "missing 'data' array".into(),
            })?;
        if data.len() != texts.len() {
            return Err(LlmError::MalformedResponse {
                detail: format!("expected {} embeddings, got {}", texts.len(), data.len()),
            });
        }
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (slot, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(|i| i.as_u64())
                .map(|i| i as usize)
                .unwrap_or(slot);
            let raw = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| LlmError::MalformedResponse {
                    detail: "item lacks 'embedding'".into(),
                })?;
            let mut vector: Vec<f64> = raw.iter().filter_map(|v| v.as_f64()).collect();
            if vector.len() != raw.len() {
                return Err(LlmError::MalformedResponse {
                    detail: "non-numeric embedding component".into(),
                });
            }
            let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut vector {
                    *v /= norm;
                }
            }
            indexed.push((index, vector));
        }
        indexed.sort_by_key(|(i, _)| *i);
        let dim = indexed[0].1.len();
        if indexed.iter().any(|(_, v)| v.len() != dim) {
            return Err(LlmError::MalformedResponse {
                detail: "inconsistent embedding dimensions in batch".into(),
            });
        }
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}

/// Adapter exposing the embeddings endpoint through the retrieval trait,
/// so a remote backbone can replace the hashing encoder without touching
/// the selection code.
pub struct RemoteEmbedder {
    client: EmbeddingsClient,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig) -> Self {
        Self {
            client: EmbeddingsClient::new(cfg),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut vectors = self
            .client
            .embed_batch(std::slice::from_ref(&text.to_string()))
            .map_err(|e| EmbedError(e.to_string()))?;
        Ok(vectors.remove(0))
    }
}
