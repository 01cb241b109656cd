//! OpenAI-compatible chat-completion and embedding endpoints.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{ChatProvider, CompletionRequest, LlmError, ProviderResponse};
use crate::bank::EmbeddingVector;

pub const API_KEY_ENV: &str = "TABQA_API_KEY";

#[derive(Clone)]
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
    embedding_model: String,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("base_url", &self.base_url)
            .field("embedding_model", &self.embedding_model)
            .finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpProvider {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        embedding_model: impl Into<String>,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::NotConfigured(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            embedding_model: embedding_model.into(),
        })
    }

    /// Read the API key from [`API_KEY_ENV`].
    pub fn from_env(
        base_url: impl Into<String>,
        embedding_model: impl Into<String>,
    ) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::NotConfigured(format!("environment variable {API_KEY_ENV} is not set")))?;
        Self::new(base_url, key, embedding_model)
    }

    fn post(&self, path: &str, body: serde_json::Value, timeout: Duration) -> Result<String, LlmError> {
        let url = format!("{}/{}", self.base_url, path);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .timeout(timeout)
            .json(&body)
            .send()
            .map_err(|e| classify(e, timeout))?;
        let status = response.status();
        let text = response.text().map_err(|e| classify(e, timeout))?;
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        Ok(text)
    }

    pub fn embedding_model(&self) -> &str {
        &self.embedding_model
    }

    pub fn embed(&self, text: &str, timeout: Duration) -> Result<EmbeddingVector, LlmError> {
        let body = json!({ "model": self.embedding_model, "input": text });
        let raw = self.post("embeddings", body, timeout)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| LlmError::Decode(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Decode("embedding response has no data".into()))?
            .embedding;
        EmbeddingVector::new(values).map_err(|e| LlmError::Decode(e.to_string()))
    }
}

fn classify(err: reqwest::Error, timeout: Duration) -> LlmError {
    if err.is_timeout() {
        LlmError::Timeout {
            after_ms: timeout.as_millis() as u64,
        }
    } else {
        LlmError::Transport(err.to_string())
    }
}

impl ChatProvider for HttpProvider {
    fn id(&self) -> &str {
        "openai-compatible"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ProviderResponse, LlmError> {
        let started = Instant::now();
        let body = json!({
            "model": request.model_name,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let raw = self.post(
            "chat/completions",
            body,
            Duration::from_millis(request.timeout_ms),
        )?;
        let parsed: ChatResponse =
            serde_json::from_str(&raw).map_err(|e| LlmError::Decode(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Decode("completion response has no content".into()))?;
        Ok(ProviderResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            provider_id: self.id().to_string(),
        })
    }
}
