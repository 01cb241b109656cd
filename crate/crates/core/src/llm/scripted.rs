//! A deterministic in-process chat provider.
//!
//! Responses are keyed by the question a prompt asks and the template that
//! rendered it. The n-th call for a key gets the n-th scripted response (the
//! last one repeats). Unscripted questions get a per-template fallback in
//! which `{table}` is replaced by the table named in the prompt. Used to
//! record fixtures and to drive tests and benchmarks without a network.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{ChatProvider, CompletionRequest, LlmError, ProviderResponse, TemplateId};

/// The question a rendered prompt asks: the text after the last line
/// starting with `Question: `.
pub fn question_of(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Question: "))
        .map(str::trim)
}

/// Table name from the first `CREATE TABLE <name> (` in a prompt.
pub fn table_of(prompt: &str) -> Option<&str> {
    let rest = &prompt[prompt.find("CREATE TABLE ")? + "CREATE TABLE ".len()..];
    rest.split([' ', '(', '\n']).next().filter(|t| !t.is_empty())
}

#[derive(Debug, Default)]
pub struct ScriptedProvider {
    script: HashMap<(String, TemplateId), Vec<String>>,
    fallback: HashMap<TemplateId, String>,
    calls: Mutex<HashMap<(String, TemplateId), usize>>,
}

impl ScriptedProvider {
    /// Fallbacks: `SELECT * FROM {table}` for row retrieval,
    /// `SELECT COUNT(*) FROM {table}` for value-targeted SQL, `0` as the
    /// answer and `ACCEPT` as the verdict.
    pub fn new() -> Self {
        let mut fallback = HashMap::new();
        fallback.insert(TemplateId::SqlRowRetrieval, "SELECT * FROM {table}".to_string());
        fallback.insert(TemplateId::SqlValueTargeted, "SELECT COUNT(*) FROM {table}".to_string());
        fallback.insert(TemplateId::FinalAnswer, "0".to_string());
        fallback.insert(TemplateId::Verification, "ACCEPT".to_string());
        Self {
            fallback,
            ..Self::default()
        }
    }

    pub fn on<I, S>(mut self, question: &str, template: TemplateId, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let responses: Vec<String> = responses.into_iter().map(Into::into).collect();
        assert!(!responses.is_empty(), "a script entry needs at least one response");
        self.script.insert((question.to_string(), template), responses);
        self
    }

    pub fn fallback(mut self, template: TemplateId, response: impl Into<String>) -> Self {
        self.fallback.insert(template, response.into());
        self
    }

    fn respond(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let question = question_of(&request.prompt).unwrap_or_default().to_string();
        let key = (question, request.template_id);
        if let Some(responses) = self.script.get(&key) {
            let mut calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
            let n = calls.entry(key).or_insert(0);
            let text = responses[(*n).min(responses.len() - 1)].clone();
            *n += 1;
            return Ok(text);
        }
        let template = self
            .fallback
            .get(&request.template_id)
            .ok_or_else(|| LlmError::InvalidRequest(format!("no scripted response for {}", request.template_id)))?;
        Ok(template.replace("{table}", table_of(&request.prompt).unwrap_or("unknown_table")))
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ProviderResponse, LlmError> {
        Ok(ProviderResponse {
            text: self.respond(request)?,
            latency_ms: 0,
            provider_id: self.id().to_string(),
        })
    }
}
