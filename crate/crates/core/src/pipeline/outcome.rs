//! Per-question records: the input question, each attempt's artifacts and
//! the final outcome written to the trace.

use serde::{Deserialize, Serialize};

use super::answer::{AnswerType, AnswerValue};
use super::verify::VerificationVerdict;
use crate::bank::QueryMode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub dataset_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_type: Option<AnswerType>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    ApprovedFirstPass,
    ApprovedAfterReprocess,
    Failed,
}

impl FinalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FinalStatus::ApprovedFirstPass => "approved_first_pass",
            FinalStatus::ApprovedAfterReprocess => "approved_after_reprocess",
            FinalStatus::Failed => "failed",
        }
    }
}

/// Everything one attempt produced. Optional fields stay empty when an
/// earlier stage stopped the attempt. Nothing time-dependent is recorded, so
/// replayed runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub mode: QueryMode,
    /// Questions of the selected examples, best first.
    pub examples: Vec<String>,
    pub sql_prompt_hash: Option<String>,
    pub raw_sql: Option<String>,
    pub sql: Option<String>,
    /// Gate rejection or execution error text.
    pub sql_error: Option<String>,
    pub result_total_rows: Option<u64>,
    /// sha256 of the serialized result handed to the answer prompt.
    pub result_digest: Option<String>,
    pub answer_prompt_hash: Option<String>,
    pub raw_answer: Option<String>,
    pub parsed_answer: Option<AnswerValue>,
    pub parse_error: Option<String>,
    pub verify_prompt_hash: Option<String>,
    pub verdict: VerificationVerdict,
    pub provider_errors: Vec<String>,
    /// Failure of a local stage other than SQL (selection, templates).
    pub stage_error: Option<String>,
}

impl AttemptRecord {
    pub fn new(attempt: u32, mode: QueryMode) -> Self {
        Self {
            attempt,
            mode,
            examples: Vec::new(),
            sql_prompt_hash: None,
            raw_sql: None,
            sql: None,
            sql_error: None,
            result_total_rows: None,
            result_digest: None,
            answer_prompt_hash: None,
            raw_answer: None,
            parsed_answer: None,
            parse_error: None,
            verify_prompt_hash: None,
            verdict: VerificationVerdict::bad_format("no answer produced"),
            provider_errors: Vec::new(),
            stage_error: None,
        }
    }

    /// Flagged by the verifier or stopped before producing an answer.
    pub fn is_flagged(&self) -> bool {
        self.verdict.is_flagged()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub question_id: String,
    pub dataset_id: String,
    pub table_name: String,
    pub row_count: u64,
    pub question: String,
    pub expected_type: Option<AnswerType>,
    pub attempts: Vec<AttemptRecord>,
    pub final_answer: AnswerValue,
    /// Canonical text of `final_answer`, as written to predictions.
    pub final_answer_text: String,
    pub final_status: FinalStatus,
    pub attempt_count: u32,
}

impl QaOutcome {
    /// A first-pass outcome whose only attempt was flagged or errored.
    pub fn needs_reprocess(&self) -> bool {
        self.attempts.len() == 1 && self.attempts[0].is_flagged()
    }

    /// Predictions-file line: the canonical answer with line breaks escaped
    /// so each question keeps exactly one line.
    pub fn prediction_line(&self) -> String {
        self.final_answer_text
            .replace('\\', "\\\\")
            .replace('\n', "\\n")
            .replace('\r', "\\r")
    }
}
