//! Run configuration: a flat TOML file of typed keys.
//!
//! Relative paths in a file resolve against the file's directory. The API
//! key is never read from here; see [`crate::llm::API_KEY_ENV`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{FixtureMode, GatewayConfig, RetryPolicy};
use crate::par::Execution;
use crate::pipeline::PipelineConfig;

/// Embedding model name selecting the local pseudo embedder.
pub const PSEUDO_EMBEDDING: &str = "pseudo";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub base_url: String,
    pub model: String,
    /// `pseudo` for the local embedder, otherwise an embedding model served
    /// at `base_url`.
    pub embedding_model: String,
    pub mode: FixtureMode,
    pub parallelism: usize,
    pub execution: ExecutionMode,
    pub row_cap: usize,
    pub max_attempts: u32,
    pub lite: bool,
    pub db_path: PathBuf,
    pub fixture_dir: Option<PathBuf>,
    pub bank_path: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub examples_k: usize,
    pub sample_rows: usize,
    pub max_result_bytes: usize,
    pub max_prompt_bytes: usize,
    pub query_timeout_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gateway = GatewayConfig::default();
        let pipeline = PipelineConfig::default();
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: gateway.model_name,
            embedding_model: PSEUDO_EMBEDDING.into(),
            mode: FixtureMode::Live,
            parallelism: pipeline.parallelism,
            execution: ExecutionMode::Parallel,
            row_cap: pipeline.row_cap,
            max_attempts: pipeline.max_attempts,
            lite: false,
            db_path: PathBuf::from("tabqa.db"),
            fixture_dir: None,
            bank_path: None,
            template_dir: None,
            temperature: gateway.temperature,
            max_tokens: gateway.max_tokens,
            timeout_ms: gateway.timeout_ms,
            max_retries: gateway.retry.max_retries,
            max_in_flight: gateway.max_in_flight,
            examples_k: pipeline.examples_k,
            sample_rows: pipeline.sample_rows,
            max_result_bytes: pipeline.max_result_bytes,
            max_prompt_bytes: pipeline.max_prompt_bytes,
            query_timeout_ms: pipeline.query_timeout_ms,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if table.contains_key("api_key") {
            return Err(ConfigError::Invalid(format!(
                "api_key must not appear in a config file; set {}",
                crate::llm::API_KEY_ENV
            )));
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.db_path);
        for p in [&mut self.fixture_dir, &mut self.bank_path, &mut self.template_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("parallelism", self.parallelism as u64),
            ("row_cap", self.row_cap as u64),
            ("max_attempts", self.max_attempts as u64),
            ("max_tokens", self.max_tokens as u64),
            ("timeout_ms", self.timeout_ms),
            ("max_in_flight", self.max_in_flight as u64),
            ("examples_k", self.examples_k as u64),
            ("max_result_bytes", self.max_result_bytes as u64),
            ("max_prompt_bytes", self.max_prompt_bytes as u64),
            ("query_timeout_ms", self.query_timeout_ms),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be positive")));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ConfigError::Invalid("temperature must be >= 0".into()));
        }
        if self.mode != FixtureMode::Live && self.fixture_dir.is_none() {
            return Err(ConfigError::Invalid(format!("{:?} mode requires fixture_dir", self.mode).to_lowercase()));
        }
        if self.embedding_model.trim().is_empty() || self.model.trim().is_empty() {
            return Err(ConfigError::Invalid("model names must be non-empty".into()));
        }
        Ok(())
    }

    /// Benchmark runs pin the temperature at 0.
    pub fn validate_for_bench(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if self.temperature != 0.0 {
            return Err(ConfigError::Invalid("benchmark runs require temperature = 0".into()));
        }
        Ok(())
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            timeout_ms: self.timeout_ms,
            max_in_flight: self.max_in_flight,
            retry: RetryPolicy {
                max_retries: self.max_retries,
                ..RetryPolicy::default()
            },
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            examples_k: self.examples_k,
            sample_rows: self.sample_rows,
            row_cap: self.row_cap,
            max_result_bytes: self.max_result_bytes,
            max_prompt_bytes: self.max_prompt_bytes,
            query_timeout_ms: self.query_timeout_ms,
            max_attempts: self.max_attempts,
            parallelism: self.parallelism,
            execution: match self.execution {
                ExecutionMode::Sequential => Execution::Sequential,
                ExecutionMode::Parallel => Execution::Parallel,
            },
        }
    }
}
