//! The per-question pipeline: select examples, generate SQL, execute,
//! extract the answer, verify, and reprocess flagged questions.

use std::collections::HashSet;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::answer::{parse_answer, AnswerValue};
use super::merge::{merge_results, MergeError};
use super::outcome::{AttemptRecord, FinalStatus, QaOutcome, QuestionRecord};
use super::verify::{VerificationVerdict, Verifier};
use crate::bank::{ExampleBank, QueryMode};
use crate::dataset::{DatasetHandle, DatasetStore, TableSchema};
use crate::llm::{render_examples, Gateway, LlmError, TemplateId, TemplateSet};
use crate::par::{self, Execution};
use crate::sql::{execute, extract_sql, serialize_result, validate_query, DEFAULT_MAX_RESULT_BYTES, DEFAULT_ROW_CAP};

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Examples placed in each SQL prompt.
    pub examples_k: usize,
    /// Sample rows shown under the table DDL.
    pub sample_rows: usize,
    pub row_cap: usize,
    /// Byte budget of the serialized result in the answer prompt.
    pub max_result_bytes: usize,
    /// Upper bound on any rendered prompt. Oversized prompts drop sample
    /// rows or result rows; a prompt that still does not fit stops the
    /// attempt.
    pub max_prompt_bytes: usize,
    pub query_timeout_ms: u64,
    /// Attempts per question, the first included.
    pub max_attempts: u32,
    /// Questions processed concurrently.
    pub parallelism: usize,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            examples_k: 2,
            sample_rows: 3,
            row_cap: DEFAULT_ROW_CAP,
            max_result_bytes: DEFAULT_MAX_RESULT_BYTES,
            max_prompt_bytes: 32 * 1024,
            query_timeout_ms: 10_000,
            max_attempts: 2,
            parallelism: 4,
            execution: Execution::Parallel,
        }
    }
}

fn mode_for(attempt: u32) -> QueryMode {
    if attempt <= 1 {
        QueryMode::RowRetrieval
    } else {
        QueryMode::ValueTargeted
    }
}

fn sql_template(mode: QueryMode) -> TemplateId {
    match mode {
        QueryMode::RowRetrieval => TemplateId::SqlRowRetrieval,
        QueryMode::ValueTargeted => TemplateId::SqlValueTargeted,
    }
}

fn provider_error(stage: &str, e: &LlmError) -> String {
    format!("{stage}: {}: {e}", e.kind())
}

fn stop(mut rec: AttemptRecord, reason: String) -> AttemptRecord {
    rec.verdict = VerificationVerdict::bad_format(format!("no answer: {reason}"));
    rec
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Shared, read-only state for a run. Every stage failure is folded into the
/// returned outcome; nothing here returns an error per question.
pub struct Pipeline<'a> {
    store: &'a DatasetStore,
    bank: &'a ExampleBank,
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        store: &'a DatasetStore,
        bank: &'a ExampleBank,
        gateway: &'a Gateway,
        templates: &'a TemplateSet,
        config: PipelineConfig,
    ) -> Self {
        Self {
            store,
            bank,
            gateway,
            templates,
            config,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn run_attempt(
        &self,
        question: &QuestionRecord,
        handle: &DatasetHandle,
        schema: &TableSchema,
        attempt: u32,
    ) -> AttemptRecord {
        let mode = mode_for(attempt);
        let mut rec = AttemptRecord::new(attempt, mode);
        let column_headers = schema.column_headers();

        // Example selection.
        let embedding = match self.gateway.embed(&question.text) {
            Ok(e) => e,
            Err(e) => {
                rec.provider_errors.push(provider_error("embedding", &e));
                return stop(rec, "question embedding failed".into());
            }
        };
        let examples = match self.bank.select_examples(&embedding, self.config.examples_k, mode) {
            Ok(ex) => ex,
            Err(e) => {
                rec.stage_error = Some(format!("example selection: {e}"));
                return stop(rec, "example selection failed".into());
            }
        };
        rec.examples = examples.iter().map(|e| e.question.clone()).collect();

        // SQL generation. Sample rows are dropped from the end until the
        // prompt fits.
        let template_id = sql_template(mode);
        let examples_text = render_examples(examples);
        let mut prompt = None;
        for n in (0..=schema.sample_rows.len()).rev() {
            let rendered = self.templates.get(template_id).render_used(&[
                ("table_info", &schema.with_sample_rows(n).table_info()),
                ("column_headers", &column_headers),
                ("examples", &examples_text),
                ("question", &question.text),
            ]);
            match rendered {
                Ok(p) if p.len() <= self.config.max_prompt_bytes => {
                    prompt = Some(p);
                    break;
                }
                Ok(_) => continue,
                Err(e) => {
                    rec.stage_error = Some(e.to_string());
                    return stop(rec, "SQL prompt could not be rendered".into());
                }
            }
        }
        let Some(prompt) = prompt else {
            rec.stage_error = Some(format!("SQL prompt exceeds {} bytes", self.config.max_prompt_bytes));
            return stop(rec, "SQL prompt too large".into());
        };
        let request = self.gateway.request(template_id, prompt);
        rec.sql_prompt_hash = Some(request.fixture_key());
        let raw_sql = match self.gateway.complete(&request) {
            Ok(r) => r.text,
            Err(e) => {
                rec.provider_errors.push(provider_error("sql", &e));
                return stop(rec, "SQL generation failed".into());
            }
        };
        rec.raw_sql = Some(raw_sql.clone());

        // Gate and execution. Errors here route the question to reprocessing
        // like a verification flag.
        let query = match extract_sql(&raw_sql).and_then(|s| validate_query(&s, mode)) {
            Ok(q) => q,
            Err(e) => {
                rec.sql_error = Some(format!("rejected: {e}"));
                return stop(rec, "SQL was rejected".into());
            }
        };
        rec.sql = Some(query.text.clone());
        let timeout = Duration::from_millis(self.config.query_timeout_ms);
        let result = match execute(self.store, &query, handle, self.config.row_cap, timeout) {
            Ok(r) => r,
            Err(e) => {
                rec.sql_error = Some(e.to_string());
                return stop(rec, "SQL execution failed".into());
            }
        };
        rec.result_total_rows = Some(result.total_rows);
        // Answer extraction. An oversized prompt shrinks the result budget
        // by the overflow and serializes again.
        let render_answer = |serialized: &str| {
            self.templates.get(TemplateId::FinalAnswer).render_used(&[
                ("table_info", &schema.table_info()),
                ("column_headers", &column_headers),
                ("question", &question.text),
                ("result", serialized),
            ])
        };
        let mut serialized = serialize_result(&result, self.config.max_result_bytes);
        let mut prompt = match render_answer(&serialized) {
            Ok(p) => p,
            Err(e) => {
                rec.stage_error = Some(e.to_string());
                return stop(rec, "answer prompt could not be rendered".into());
            }
        };
        if prompt.len() > self.config.max_prompt_bytes {
            let overflow = prompt.len() - self.config.max_prompt_bytes;
            let budget = serialized.len().saturating_sub(overflow);
            serialized = serialize_result(&result, budget);
            prompt = render_answer(&serialized).unwrap_or_default();
            if prompt.len() > self.config.max_prompt_bytes {
                rec.stage_error = Some(format!("answer prompt exceeds {} bytes", self.config.max_prompt_bytes));
                return stop(rec, "answer prompt too large".into());
            }
        }
        rec.result_digest = Some(sha256_hex(&serialized));
        let request = self.gateway.request(TemplateId::FinalAnswer, prompt);
        rec.answer_prompt_hash = Some(request.fixture_key());
        let raw_answer = match self.gateway.complete(&request) {
            Ok(r) => r.text,
            Err(e) => {
                rec.provider_errors.push(provider_error("answer", &e));
                return stop(rec, "answer generation failed".into());
            }
        };
        let parsed = parse_answer(&raw_answer, question.expected_type);
        rec.raw_answer = Some(raw_answer);
        match &parsed {
            Ok(v) => rec.parsed_answer = Some(v.clone()),
            Err(e) => rec.parse_error = Some(e.to_string()),
        }

        // Verification.
        let v = Verifier::new(self.gateway, self.templates).verify(&question.text, &column_headers, &parsed);
        rec.verify_prompt_hash = v.prompt_hash;
        if let Some(e) = v.provider_error {
            rec.provider_errors.push(format!("verification: {e}"));
        }
        rec.verdict = v.verdict;
        rec
    }

    #[allow(clippy::result_large_err)]
    fn schema_or_stop(&self, handle: &DatasetHandle, attempt: u32) -> Result<TableSchema, AttemptRecord> {
        self.store.schema_info(handle, self.config.sample_rows).map_err(|e| {
            let mut rec = AttemptRecord::new(attempt, mode_for(attempt));
            rec.stage_error = Some(format!("schema: {e}"));
            stop(rec, "table schema unavailable".into())
        })
    }

    fn finish(&self, question: &QuestionRecord, handle: &DatasetHandle, attempts: Vec<AttemptRecord>) -> QaOutcome {
        let last = attempts.last().expect("at least one attempt");
        let (final_status, final_answer) = match (&last.parsed_answer, last.is_flagged()) {
            (Some(answer), false) => {
                let status = if attempts.len() == 1 {
                    FinalStatus::ApprovedFirstPass
                } else {
                    FinalStatus::ApprovedAfterReprocess
                };
                (status, answer.clone())
            }
            _ => {
                let fallback = attempts
                    .iter()
                    .rev()
                    .find_map(|a| a.parsed_answer.clone())
                    .unwrap_or_else(|| AnswerValue::empty_marker(question.expected_type));
                (FinalStatus::Failed, fallback)
            }
        };
        QaOutcome {
            question_id: question.question_id.clone(),
            dataset_id: question.dataset_id.clone(),
            table_name: handle.table_name.clone(),
            row_count: handle.row_count,
            question: question.text.clone(),
            expected_type: question.expected_type,
            final_answer_text: final_answer.canonical(),
            final_answer,
            final_status,
            attempt_count: attempts.len() as u32,
            attempts,
        }
    }

    /// Attempt 1 only, with row-retrieval prompting.
    pub fn first_pass(&self, question: &QuestionRecord, handle: &DatasetHandle) -> QaOutcome {
        let attempt = match self.schema_or_stop(handle, 1) {
            Ok(schema) => self.run_attempt(question, handle, &schema, 1),
            Err(rec) => rec,
        };
        self.finish(question, handle, vec![attempt])
    }

    /// Re-run the whole pipeline with value-targeted prompting until an
    /// attempt is accepted or `max_attempts` is reached. The first-pass
    /// attempt stays in the returned outcome.
    pub fn reprocess(&self, first: &QaOutcome, question: &QuestionRecord, handle: &DatasetHandle) -> QaOutcome {
        let mut attempts = first.attempts.clone();
        let schema = self.schema_or_stop(handle, 2);
        while (attempts.len() as u32) < self.config.max_attempts {
            let n = attempts.len() as u32 + 1;
            let rec = match &schema {
                Ok(schema) => self.run_attempt(question, handle, schema, n),
                Err(stopped) => AttemptRecord { attempt: n, mode: mode_for(n), ..stopped.clone() },
            };
            let accepted = !rec.is_flagged();
            attempts.push(rec);
            if accepted {
                break;
            }
        }
        self.finish(question, handle, attempts)
    }

    pub fn run_question(&self, question: &QuestionRecord, handle: &DatasetHandle) -> QaOutcome {
        let first = self.first_pass(question, handle);
        if first.needs_reprocess() && self.config.max_attempts > 1 {
            self.reprocess(&first, question, handle)
        } else {
            first
        }
    }

    /// First pass over every question, then one reprocess pass over the
    /// flagged ones, merged back in input order.
    pub fn run_batch(&self, jobs: &[(QuestionRecord, DatasetHandle)]) -> Result<Vec<QaOutcome>, MergeError> {
        let mut ids = HashSet::new();
        for (q, _) in jobs {
            if !ids.insert(q.question_id.as_str()) {
                return Err(MergeError::DuplicateFirstPass(q.question_id.clone()));
            }
        }
        let exec = self.config.execution;
        let threads = self.config.parallelism;
        let first = par::map_bounded(exec, threads, jobs, |(q, h)| self.first_pass(q, h));
        log::info!(
            "first pass: {} questions, {} flagged",
            first.len(),
            first.iter().filter(|o| o.needs_reprocess()).count()
        );
        let flagged: Vec<(&QaOutcome, &QuestionRecord, &DatasetHandle)> = if self.config.max_attempts > 1 {
            first
                .iter()
                .zip(jobs)
                .filter(|(o, _)| o.needs_reprocess())
                .map(|(o, (q, h))| (o, q, h))
                .collect()
        } else {
            Vec::new()
        };
        let reprocessed = par::map_bounded(exec, threads, &flagged, |(o, q, h)| self.reprocess(o, q, h));
        merge_results(first, reprocessed)
    }
}
