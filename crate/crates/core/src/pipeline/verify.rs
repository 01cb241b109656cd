//! Format and relevance verification of candidate answers.
//!
//! The local check comes first: an answer that failed to parse is flagged
//! without asking the provider. Otherwise one completion judges relevance.
//! Only an explicit `REJECT` flags; anything else, including provider
//! failure, accepts.

use serde::{Deserialize, Serialize};

use super::answer::{AnswerParseError, AnswerValue};
use crate::llm::{fixture_key, Gateway, TemplateId, TemplateSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub format_valid: bool,
    pub relevant: bool,
    pub decision: Decision,
    pub rationale: String,
}

const RATIONALE_MAX: usize = 200;

impl VerificationVerdict {
    pub fn accept(rationale: impl Into<String>) -> Self {
        Self {
            format_valid: true,
            relevant: true,
            decision: Decision::Accept,
            rationale: rationale.into(),
        }
    }

    pub fn bad_format(rationale: impl Into<String>) -> Self {
        Self {
            format_valid: false,
            relevant: true,
            decision: Decision::Flag,
            rationale: rationale.into(),
        }
    }

    pub fn irrelevant(rationale: impl Into<String>) -> Self {
        Self {
            format_valid: true,
            relevant: false,
            decision: Decision::Flag,
            rationale: rationale.into(),
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.decision == Decision::Flag
    }
}

fn short(s: &str) -> String {
    let s = s.trim();
    match s.char_indices().nth(RATIONALE_MAX) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Map a verifier reply to a verdict. The first non-empty line decides: it
/// flags only when it starts with `REJECT`. A rejection whose reason
/// mentions format marks the format invalid, any other rejection marks the
/// answer irrelevant.
pub fn interpret_reply(reply: &str) -> VerificationVerdict {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let head = line.trim_start_matches(['*', '"', '\'', '`']);
    if head.get(..6).is_some_and(|w| w.eq_ignore_ascii_case("reject")) {
        let reason = head[6..].trim_start_matches([':', ' ', '-']);
        if reason.to_ascii_lowercase().contains("format") {
            VerificationVerdict::bad_format(short(line))
        } else {
            VerificationVerdict::irrelevant(short(line))
        }
    } else if line.is_empty() {
        VerificationVerdict::accept("empty verifier reply, accepted by default")
    } else {
        VerificationVerdict::accept(short(line))
    }
}

/// What one verification produced, for the trace.
#[derive(Clone, Debug)]
pub struct Verification {
    pub verdict: VerificationVerdict,
    pub prompt_hash: Option<String>,
    pub provider_error: Option<String>,
}

/// Verifies answers with one provider completion each.
pub struct Verifier<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
}

impl<'a> Verifier<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        Self { gateway, templates }
    }

    pub fn verify(
        &self,
        question: &str,
        column_headers: &str,
        parsed: &Result<AnswerValue, AnswerParseError>,
    ) -> Verification {
        let answer = match parsed {
            Err(e) => {
                return Verification {
                    verdict: VerificationVerdict::bad_format(short(&e.to_string())),
                    prompt_hash: None,
                    provider_error: None,
                }
            }
            Ok(a) => a,
        };
        // The provider sees the canonical form, so equivalent raw spellings
        // hit the same fixture.
        let candidate = answer.canonical();
        let prompt = match self.templates.get(TemplateId::Verification).render_used(&[
            ("column_headers", column_headers),
            ("question", question),
            ("result", &candidate),
        ]) {
            Ok(p) => p,
            Err(e) => {
                return Verification {
                    verdict: VerificationVerdict::accept("verifier unavailable"),
                    prompt_hash: None,
                    provider_error: Some(format!("template: {e}")),
                }
            }
        };
        let hash = fixture_key(TemplateId::Verification.as_str(), &prompt);
        let request = self.gateway.request(TemplateId::Verification, prompt);
        match self.gateway.complete(&request) {
            Ok(resp) => Verification {
                verdict: interpret_reply(&resp.text),
                prompt_hash: Some(hash),
                provider_error: None,
            },
            Err(e) => Verification {
                verdict: VerificationVerdict::accept("verifier unavailable"),
                prompt_hash: Some(hash),
                provider_error: Some(format!("{}: {e}", e.kind())),
            },
        }
    }
}
