//! Provider access: prompt templates, chat completions and embeddings, with
//! a record/replay fixture layer for deterministic runs.

pub mod fixtures;
pub mod http;
pub mod pseudo;
pub mod scripted;
pub mod template;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::EmbeddingVector;
pub use fixtures::{fixture_key, FixtureStore};
pub use http::{HttpProvider, API_KEY_ENV};
pub use pseudo::PseudoEmbedder;
pub use scripted::ScriptedProvider;
pub use template::{render_examples, PromptTemplate, TemplateError, TemplateId, TemplateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("provider timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("replay miss for template {template_id} (fixture {hash})")]
    ReplayMiss { template_id: String, hash: String },
    #[error("provider not configured: {0}")]
    NotConfigured(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("could not decode provider response: {0}")]
    Decode(String),
    #[error("fixture store error: {0}")]
    Fixture(String),
}

impl LlmError {
    /// Timeouts, rate limits, server errors and transport failures.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout { .. } | LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::Timeout { .. } => "timeout",
            LlmError::Http { .. } => "http",
            LlmError::Transport(_) => "transport",
            LlmError::ReplayMiss { .. } => "replay_miss",
            LlmError::NotConfigured(_) => "not_configured",
            LlmError::InvalidRequest(_) => "invalid_request",
            LlmError::Decode(_) => "decode",
            LlmError::Fixture(_) => "fixture",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template_id: TemplateId,
    pub prompt: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl CompletionRequest {
    fn check(&self) -> Result<(), LlmError> {
        if self.prompt.is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 || self.timeout_ms == 0 {
            return Err(LlmError::InvalidRequest("max_tokens and timeout_ms must be positive".into()));
        }
        Ok(())
    }

    /// Key of this request in a fixture store.
    pub fn fixture_key(&self) -> String {
        fixture_key(self.template_id.as_str(), &self.prompt)
    }
}

/// Raw provider output. `text` is kept verbatim; parsers downstream do any
/// trimming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    pub latency_ms: u64,
    pub provider_id: String,
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<ProviderResponse, LlmError>;
}

pub trait EmbeddingProvider: Send + Sync {
    /// Provider + model identifier; keys the embedding cache.
    fn id(&self) -> String;
    fn embed(&self, text: &str, timeout: Duration) -> Result<EmbeddingVector, LlmError>;
    /// Deterministic local embedders bypass fixtures and caches.
    fn is_local(&self) -> bool {
        false
    }
}

impl EmbeddingProvider for PseudoEmbedder {
    fn id(&self) -> String {
        PseudoEmbedder::id(self)
    }

    fn embed(&self, text: &str, _timeout: Duration) -> Result<EmbeddingVector, LlmError> {
        PseudoEmbedder::embed(self, text)
            .ok_or_else(|| LlmError::InvalidRequest("cannot embed empty text".into()))
    }

    fn is_local(&self) -> bool {
        true
    }
}

impl EmbeddingProvider for HttpProvider {
    fn id(&self) -> String {
        format!("openai-compatible:{}", self.embedding_model())
    }

    fn embed(&self, text: &str, timeout: Duration) -> Result<EmbeddingVector, LlmError> {
        HttpProvider::embed(self, text, timeout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixtureMode {
    #[default]
    Live,
    Record,
    Replay,
}

/// Exponential backoff for retryable provider errors.
#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_backoff.saturating_mul(factor).min(self.max_backoff)
    }

    /// Run `op`, retrying retryable errors up to `max_retries` times.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut retry = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && retry < self.max_retries => {
                    let wait = self.backoff(retry);
                    log::warn!("retryable provider error ({e}); retry {} in {wait:?}", retry + 1);
                    std::thread::sleep(wait);
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight provider calls.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_ms: 60_000,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// Single entry point for every provider call a run makes.
pub struct Gateway {
    mode: FixtureMode,
    chat: Option<Arc<dyn ChatProvider>>,
    embedder: Arc<dyn EmbeddingProvider>,
    fixtures: Option<FixtureStore>,
    config: GatewayConfig,
    limiter: Limiter,
    requests: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("embedder", &self.embedder.id())
            .field("fixtures", &self.fixtures)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(
        mode: FixtureMode,
        chat: Option<Arc<dyn ChatProvider>>,
        embedder: Arc<dyn EmbeddingProvider>,
        fixtures: Option<FixtureStore>,
        config: GatewayConfig,
    ) -> Result<Self, LlmError> {
        match mode {
            FixtureMode::Replay | FixtureMode::Record if fixtures.is_none() => {
                return Err(LlmError::NotConfigured(format!("{mode:?} mode needs a fixture directory")));
            }
            FixtureMode::Live | FixtureMode::Record if chat.is_none() => {
                return Err(LlmError::NotConfigured(format!("{mode:?} mode needs a chat provider")));
            }
            _ => {}
        }
        Ok(Self {
            mode,
            chat,
            embedder,
            fixtures,
            limiter: Limiter::new(config.max_in_flight),
            config,
            requests: AtomicU64::new(0),
        })
    }

    /// Replay-only gateway with the pseudo embedder.
    pub fn replay(dir: impl Into<std::path::PathBuf>, config: GatewayConfig) -> Result<Self, LlmError> {
        Self::new(
            FixtureMode::Replay,
            None,
            Arc::new(PseudoEmbedder::default()),
            Some(FixtureStore::new(dir)),
            config,
        )
    }

    pub fn mode(&self) -> FixtureMode {
        self.mode
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn embedder_id(&self) -> String {
        self.embedder.id()
    }

    /// Completions served so far, whether live or from fixtures.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn request(&self, template_id: TemplateId, prompt: String) -> CompletionRequest {
        CompletionRequest {
            template_id,
            prompt,
            model_name: self.config.model_name.clone(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            timeout_ms: self.config.timeout_ms,
        }
    }

    fn fixture_store(&self) -> Result<&FixtureStore, LlmError> {
        self.fixtures
            .as_ref()
            .ok_or_else(|| LlmError::NotConfigured("no fixture directory".into()))
    }

    fn live_complete(&self, request: &CompletionRequest) -> Result<ProviderResponse, LlmError> {
        let chat = self
            .chat
            .as_ref()
            .ok_or_else(|| LlmError::NotConfigured("no chat provider".into()))?;
        let _permit = self.limiter.acquire();
        self.config.retry.run(|| chat.complete(request))
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<ProviderResponse, LlmError> {
        request.check()?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        log::debug!("{} prompt ({} bytes):\n{}", request.template_id, request.prompt.len(), request.prompt);
        match self.mode {
            FixtureMode::Live => self.live_complete(request),
            FixtureMode::Replay => {
                let key = request.fixture_key();
                match self.fixture_store()?.get(&key) {
                    Ok(Some(text)) => Ok(ProviderResponse {
                        text,
                        latency_ms: 0,
                        provider_id: "replay".into(),
                    }),
                    Ok(None) => Err(LlmError::ReplayMiss {
                        template_id: request.template_id.to_string(),
                        hash: key,
                    }),
                    Err(e) => Err(LlmError::Fixture(e.to_string())),
                }
            }
            FixtureMode::Record => {
                let response = self.live_complete(request)?;
                self.fixture_store()?
                    .put(&request.fixture_key(), &response.text)
                    .map_err(|e| LlmError::Fixture(e.to_string()))?;
                Ok(response)
            }
        }
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidRequest("cannot embed empty text".into()));
        }
        let timeout = Duration::from_millis(self.config.timeout_ms);
        if self.embedder.is_local() {
            return self.embedder.embed(text, timeout);
        }
        let key = fixture_key(&format!("embedding:{}", self.embedder.id()), text);
        let live = || {
            let _permit = self.limiter.acquire();
            self.config.retry.run(|| self.embedder.embed(text, timeout))
        };
        match self.mode {
            FixtureMode::Live => live(),
            FixtureMode::Replay => {
                let body = self
                    .fixture_store()?
                    .get(&key)
                    .map_err(|e| LlmError::Fixture(e.to_string()))?
                    .ok_or_else(|| LlmError::ReplayMiss {
                        template_id: "embedding".into(),
                        hash: key.clone(),
                    })?;
                let values: Vec<f64> =
                    serde_json::from_str(&body).map_err(|e| LlmError::Decode(e.to_string()))?;
                EmbeddingVector::new(values).map_err(|e| LlmError::Decode(e.to_string()))
            }
            FixtureMode::Record => {
                let v = live()?;
                let body = serde_json::to_string(v.values()).map_err(|e| LlmError::Fixture(e.to_string()))?;
                self.fixture_store()?
                    .put(&key, &body)
                    .map_err(|e| LlmError::Fixture(e.to_string()))?;
                Ok(v)
            }
        }
    }
}
