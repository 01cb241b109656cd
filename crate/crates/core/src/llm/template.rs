//! Prompt templates with `{placeholder}` markers.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::ExamplePair;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: TemplateId, name: String },
    #[error("template {template}: missing binding(s) for {missing:?}")]
    MissingBinding {
        template: TemplateId,
        missing: Vec<String>,
    },
    #[error("template {template}: binding {key:?} does not match any placeholder in the body")]
    UnknownBinding { template: TemplateId, key: String },
    #[error("template {template}: binding {key:?} given twice")]
    DuplicateBinding { template: TemplateId, key: String },
    #[error("cannot read template file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SqlRowRetrieval,
    SqlValueTargeted,
    FinalAnswer,
    Verification,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::SqlRowRetrieval,
        TemplateId::SqlValueTargeted,
        TemplateId::FinalAnswer,
        TemplateId::Verification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::SqlRowRetrieval => "sql_row_retrieval",
            TemplateId::SqlValueTargeted => "sql_value_targeted",
            TemplateId::FinalAnswer => "final_answer",
            TemplateId::Verification => "verification",
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateId::SqlRowRetrieval => include_str!("../../templates/sql_row_retrieval.txt"),
            TemplateId::SqlValueTargeted => include_str!("../../templates/sql_value_targeted.txt"),
            TemplateId::FinalAnswer => include_str!("../../templates/final_answer.txt"),
            TemplateId::Verification => include_str!("../../templates/verification.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five names a template body may reference.
pub const PLACEHOLDERS: [&str; 5] = ["table_info", "column_headers", "question", "result", "examples"];

#[derive(Debug)]
enum Piece {
    Text(String),
    Slot(&'static str),
}

/// A template body split into literal text and placeholder slots.
#[derive(Debug)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
    pieces: Vec<Piece>,
    placeholders: BTreeSet<&'static str>,
}

impl PromptTemplate {
    /// Parse `body`. `{name}` with an identifier inside is a placeholder and
    /// must be one of [`PLACEHOLDERS`]; any other brace is literal text.
    pub fn new(id: TemplateId, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let mut pieces = Vec::new();
        let mut placeholders = BTreeSet::new();
        let mut text = String::new();
        let mut rest = body.as_str();
        while let Some(open) = rest.find('{') {
            text.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let ident_len = after
                .char_indices()
                .find(|&(_, c)| !(c.is_ascii_alphanumeric() || c == '_'))
                .map(|(i, _)| i)
                .unwrap_or(after.len());
            let is_slot = ident_len > 0
                && after[ident_len..].starts_with('}')
                && !after.starts_with(|c: char| c.is_ascii_digit());
            if !is_slot {
                text.push('{');
                rest = after;
                continue;
            }
            let name = &after[..ident_len];
            let slot = PLACEHOLDERS
                .iter()
                .copied()
                .find(|p| *p == name)
                .ok_or_else(|| TemplateError::UnknownPlaceholder {
                    template: id,
                    name: name.to_string(),
                })?;
            if !text.is_empty() {
                pieces.push(Piece::Text(std::mem::take(&mut text)));
            }
            pieces.push(Piece::Slot(slot));
            placeholders.insert(slot);
            rest = &after[ident_len + 1..];
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Ok(Self {
            id,
            body,
            pieces,
            placeholders,
        })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.placeholders.iter().copied()
    }

    /// Substitute every placeholder. Bindings must cover exactly the
    /// placeholders present in the body; bound values are inserted verbatim
    /// and never rescanned.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut seen = BTreeSet::new();
        for (key, _) in bindings {
            if !self.placeholders.contains(*key) {
                return Err(TemplateError::UnknownBinding {
                    template: self.id,
                    key: key.to_string(),
                });
            }
            if !seen.insert(*key) {
                return Err(TemplateError::DuplicateBinding {
                    template: self.id,
                    key: key.to_string(),
                });
            }
        }
        let missing: Vec<String> = self
            .placeholders
            .iter()
            .filter(|p| !seen.contains(*p))
            .map(|p| p.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(TemplateError::MissingBinding {
                template: self.id,
                missing,
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .unwrap_or_default();
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Like [`render`](Self::render), but bindings for placeholders the body
    /// does not use are ignored. Lets user templates drop a slot.
    pub fn render_used(&self, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        let used: Vec<(&str, &str)> = bindings
            .iter()
            .filter(|(k, _)| self.placeholders.contains(*k))
            .copied()
            .collect();
        self.render(&used)
    }
}

/// The four templates a run uses.
#[derive(Debug)]
pub struct TemplateSet {
    pub sql_row_retrieval: PromptTemplate,
    pub sql_value_targeted: PromptTemplate,
    pub final_answer: PromptTemplate,
    pub verification: PromptTemplate,
}

impl TemplateSet {
    /// The bundled default bodies.
    pub fn builtin() -> Self {
        let load = |id: TemplateId| {
            PromptTemplate::new(id, id.default_body()).expect("bundled templates are well-formed")
        };
        Self {
            sql_row_retrieval: load(TemplateId::SqlRowRetrieval),
            sql_value_targeted: load(TemplateId::SqlValueTargeted),
            final_answer: load(TemplateId::FinalAnswer),
            verification: load(TemplateId::Verification),
        }
    }

    /// Defaults, overridden by any `<template_id>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let load = |id: TemplateId| -> Result<PromptTemplate, TemplateError> {
            let path = dir.join(format!("{}.txt", id.as_str()));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                PromptTemplate::new(id, body)
            } else {
                PromptTemplate::new(id, id.default_body())
            }
        };
        Ok(Self {
            sql_row_retrieval: load(TemplateId::SqlRowRetrieval)?,
            sql_value_targeted: load(TemplateId::SqlValueTargeted)?,
            final_answer: load(TemplateId::FinalAnswer)?,
            verification: load(TemplateId::Verification)?,
        })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        match id {
            TemplateId::SqlRowRetrieval => &self.sql_row_retrieval,
            TemplateId::SqlValueTargeted => &self.sql_value_targeted,
            TemplateId::FinalAnswer => &self.final_answer,
            TemplateId::Verification => &self.verification,
        }
    }
}

/// Render selected examples for the `{examples}` slot, in selection order.
pub fn render_examples<'a>(examples: impl IntoIterator<Item = &'a ExamplePair>) -> String {
    examples
        .into_iter()
        .map(|e| format!("Question: {}\nSQL: {}", e.question, e.sql))
        .collect::<Vec<_>>()
        .join("\n\n")
}
