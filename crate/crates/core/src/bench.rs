//! Benchmark runs: load questions and gold, run the pipeline, score, and
//! write predictions, trace and summary files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::bank::{self, BankError, ExampleBank};
use crate::config::{ConfigError, RunConfig, PSEUDO_EMBEDDING};
use crate::dataset::{DatasetError, DatasetHandle, DatasetStore, LITE_MAX_ROWS};
use crate::eval::{self, EvalError, GoldRecord};
use crate::llm::{
    ChatProvider, EmbeddingProvider, FixtureMode, FixtureStore, Gateway, HttpProvider, LlmError, PseudoEmbedder,
    TemplateSet, API_KEY_ENV,
};
use crate::pipeline::{AnswerType, AnswerValue, FinalStatus, Pipeline, QaOutcome, QuestionRecord};

/// Errors that end a command. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Provider(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Provider(_) => 4,
            RunError::Output { .. } => 1,
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<DatasetError> for RunError {
    fn from(e: DatasetError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<EvalError> for RunError {
    fn from(e: EvalError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<BankError> for RunError {
    fn from(e: BankError) -> Self {
        match e {
            BankError::Embedding(inner) => RunError::Provider(format!("embedding the example bank: {inner}")),
            other => RunError::Config(format!("example bank: {other}")),
        }
    }
}

fn output_error(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything a command needs, built once from a [`RunConfig`] and frozen.
pub struct Workspace {
    pub config: RunConfig,
    pub store: DatasetStore,
    pub bank: ExampleBank,
    pub gateway: Gateway,
    pub templates: TemplateSet,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("config", &self.config)
            .field("gateway", &self.gateway)
            .finish_non_exhaustive()
    }
}

impl Workspace {
    /// Live and record modes read the API key from the environment.
    pub fn open(config: RunConfig) -> Result<Self, RunError> {
        Self::with_provider(config, None)
    }

    /// Like [`open`](Self::open) with `chat` replacing the HTTP chat
    /// provider.
    pub fn with_provider(config: RunConfig, chat: Option<Arc<dyn ChatProvider>>) -> Result<Self, RunError> {
        config.validate()?;
        let store = DatasetStore::open(&config.db_path)?;
        let templates = match &config.template_dir {
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| RunError::Config(e.to_string()))?,
            None => TemplateSet::builtin(),
        };
        let needs_live = config.mode != FixtureMode::Replay;
        let key_missing = |e: LlmError| RunError::Config(format!("{e} (required in {:?} mode)", config.mode));

        let embedder: Arc<dyn EmbeddingProvider> = if config.embedding_model == PSEUDO_EMBEDDING {
            Arc::new(PseudoEmbedder::default())
        } else if needs_live {
            Arc::new(HttpProvider::from_env(&config.base_url, &config.embedding_model).map_err(key_missing)?)
        } else {
            // Replayed embeddings never reach the endpoint.
            Arc::new(HttpProvider::new(&config.base_url, "", &config.embedding_model).map_err(key_missing)?)
        };
        let chat: Option<Arc<dyn ChatProvider>> = match chat {
            Some(c) => Some(c),
            None if needs_live => Some(Arc::new(
                HttpProvider::from_env(&config.base_url, &config.embedding_model).map_err(key_missing)?,
            )),
            None => None,
        };
        let fixtures = config.fixture_dir.as_ref().map(FixtureStore::new);
        let gateway = Gateway::new(config.mode, chat, embedder.clone(), fixtures, config.gateway_config())
            .map_err(|e| RunError::Config(e.to_string()))?;

        let pairs = match &config.bank_path {
            Some(p) => bank::load_bank_file(p)?,
            None => bank::parse_bank(bank::BUILTIN_BANK)?,
        };
        let cache = (!embedder.is_local()).then(|| {
            let anchor = config
                .bank_path
                .clone()
                .unwrap_or_else(|| config.db_path.with_file_name("example_bank.toml"));
            bank::cache_path(&anchor, &embedder.id())
        });
        let bank = bank::build_bank(pairs, &gateway, cache.as_deref())?;
        Ok(Self {
            config,
            store,
            bank,
            gateway,
            templates,
        })
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(
            &self.store,
            &self.bank,
            &self.gateway,
            &self.templates,
            self.config.pipeline_config(),
        )
    }

    /// The handle questions on `dataset_id` run against: the Lite sample
    /// when the config asks for it.
    pub fn resolve(&self, dataset_id: &str) -> Result<DatasetHandle, RunError> {
        let handle = self.store.handle(dataset_id)?;
        if self.config.lite {
            Ok(self.store.sample_lite(&handle, LITE_MAX_ROWS)?)
        } else {
            Ok(handle)
        }
    }

    /// Answer one question. A question that fails only because the provider
    /// did is reported as a provider error.
    pub fn ask(&self, dataset_id: &str, text: &str, expected: Option<AnswerType>) -> Result<QaOutcome, RunError> {
        if text.trim().is_empty() {
            return Err(RunError::Data("question text is empty".into()));
        }
        let handle = self.resolve(dataset_id)?;
        let question = QuestionRecord {
            question_id: "ask".into(),
            dataset_id: dataset_id.into(),
            text: text.into(),
            expected_type: expected,
        };
        let outcome = self.pipeline().run_question(&question, &handle);
        if outcome.final_status == FinalStatus::Failed {
            if let Some(err) = failed_by_provider(&outcome) {
                return Err(RunError::Provider(err.to_string()));
            }
        }
        Ok(outcome)
    }
}

/// The provider error of an outcome whose every attempt stopped on one.
fn failed_by_provider(outcome: &QaOutcome) -> Option<&str> {
    let all = outcome
        .attempts
        .iter()
        .all(|a| a.parsed_answer.is_none() && !a.provider_errors.is_empty());
    if all {
        outcome.attempts.last()?.provider_errors.first().map(String::as_str)
    } else {
        None
    }
}

#[derive(Deserialize)]
struct QuestionLine {
    id: String,
    dataset: String,
    question: String,
    #[serde(rename = "type", default)]
    answer_type: Option<AnswerType>,
}

#[derive(Deserialize)]
struct GoldLine {
    id: String,
    answer: Json,
    #[serde(rename = "type", default)]
    answer_type: Option<AnswerType>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, RunError> {
    let file = fs::File::open(path).map_err(|e| RunError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| RunError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Questions file: JSON Lines with `id`, `dataset`, `question` and an
/// optional `type`. Other fields are ignored.
pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>, RunError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (line, q) in read_jsonl::<QuestionLine>(path)? {
        if q.question.trim().is_empty() {
            return Err(RunError::Data(format!("{}:{line}: empty question", path.display())));
        }
        if let Some(first) = seen.insert(q.id.clone(), line) {
            return Err(RunError::Data(format!(
                "{}:{line}: question id {} already used on line {first}",
                path.display(),
                q.id
            )));
        }
        out.push(QuestionRecord {
            question_id: q.id,
            dataset_id: q.dataset,
            text: q.question,
            expected_type: q.answer_type,
        });
    }
    Ok(out)
}

/// Typed gold value from its JSON form. Without a declared type the JSON
/// shape decides: bool, number, string, or a list of numbers or strings.
pub fn gold_value(answer: &Json, declared: Option<AnswerType>) -> Option<AnswerValue> {
    let as_number = |v: &Json| match v {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => crate::pipeline::answer::parse_number(s),
        _ => None,
    };
    let as_text = |v: &Json| match v {
        Json::String(s) => Some(s.clone()),
        Json::Number(n) => Some(n.to_string()),
        Json::Bool(b) => Some(if *b { "True" } else { "False" }.to_string()),
        _ => None,
    };
    let list = |v: &Json| v.as_array().cloned();
    let ty = declared.or_else(|| match answer {
        Json::Bool(_) => Some(AnswerType::Boolean),
        Json::Number(_) => Some(AnswerType::Number),
        Json::String(_) => Some(AnswerType::Category),
        Json::Array(items) if !items.is_empty() && items.iter().all(Json::is_number) => Some(AnswerType::ListNumber),
        Json::Array(_) => Some(AnswerType::ListCategory),
        _ => None,
    })?;
    match ty {
        AnswerType::Boolean => match answer {
            Json::Bool(b) => Some(AnswerValue::Boolean(*b)),
            Json::String(s) => crate::pipeline::parse_answer(s, Some(ty)).ok(),
            _ => None,
        },
        AnswerType::Number => as_number(answer).map(AnswerValue::Number),
        AnswerType::Category => as_text(answer).map(AnswerValue::Category),
        AnswerType::ListCategory => match answer {
            Json::String(s) => crate::pipeline::parse_answer(s, Some(ty)).ok(),
            _ => list(answer)?.iter().map(as_text).collect::<Option<Vec<_>>>().map(AnswerValue::ListCategory),
        },
        AnswerType::ListNumber => match answer {
            Json::String(s) => crate::pipeline::parse_answer(s, Some(ty)).ok(),
            _ => list(answer)?.iter().map(as_number).collect::<Option<Vec<_>>>().map(AnswerValue::ListNumber),
        },
    }
}

/// Gold file: JSON Lines with `id`, `answer` and an optional `type`.
pub fn load_gold(path: &Path) -> Result<Vec<GoldRecord>, RunError> {
    let mut out = Vec::new();
    for (line, g) in read_jsonl::<GoldLine>(path)? {
        let gold = gold_value(&g.answer, g.answer_type).ok_or_else(|| {
            RunError::Data(format!("{}:{line}: cannot read gold answer {}", path.display(), g.answer))
        })?;
        out.push(GoldRecord {
            question_id: g.id,
            gold,
        });
    }
    eval::gold_index(&out)?;
    Ok(out)
}

/// Per-stage statistics of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub questions: usize,
    pub approved_first_pass: usize,
    pub approved_after_reprocess: usize,
    pub failed: usize,
    /// Questions whose first attempt was flagged or errored.
    pub flagged_first_pass: usize,
    pub flag_rate: f64,
    /// Share of flagged questions approved after reprocessing.
    pub recovery_rate: f64,
    pub attempts: usize,
    pub sql_errors: usize,
    /// Share of attempts stopped by a rejected or failing query.
    pub sql_error_rate: f64,
    pub provider_errors: usize,
    pub rows_by_dataset: BTreeMap<String, u64>,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn report(outcomes: &[QaOutcome]) -> TraceReport {
    let count = |s: FinalStatus| outcomes.iter().filter(|o| o.final_status == s).count();
    let flagged = outcomes
        .iter()
        .filter(|o| o.attempts.first().is_some_and(|a| a.is_flagged()))
        .count();
    let attempts: Vec<_> = outcomes.iter().flat_map(|o| &o.attempts).collect();
    let sql_errors = attempts.iter().filter(|a| a.sql_error.is_some()).count();
    let recovered = count(FinalStatus::ApprovedAfterReprocess);
    TraceReport {
        questions: outcomes.len(),
        approved_first_pass: count(FinalStatus::ApprovedFirstPass),
        approved_after_reprocess: recovered,
        failed: count(FinalStatus::Failed),
        flagged_first_pass: flagged,
        flag_rate: ratio(flagged, outcomes.len()),
        recovery_rate: ratio(recovered, flagged),
        attempts: attempts.len(),
        sql_errors,
        sql_error_rate: ratio(sql_errors, attempts.len()),
        provider_errors: attempts.iter().map(|a| a.provider_errors.len()).sum(),
        rows_by_dataset: outcomes
            .iter()
            .map(|o| (o.dataset_id.clone(), o.row_count))
            .collect(),
    }
}

pub fn load_trace(path: &Path) -> Result<Vec<QaOutcome>, RunError> {
    Ok(read_jsonl::<QaOutcome>(path)?.into_iter().map(|(_, o)| o).collect())
}

#[derive(Clone, Debug, Default)]
pub struct BenchOptions {
    pub strict: bool,
    /// Ingest `<dir>/<dataset>.csv` for datasets not yet in the store.
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub accuracy: f64,
    pub correct: usize,
    pub strict: bool,
    pub lite: bool,
    pub mode: FixtureMode,
    pub model: String,
    /// Every dataset table had the same checksum after the run as before.
    pub tables_unchanged: bool,
    pub report: TraceReport,
}

#[derive(Debug)]
pub struct BenchRun {
    pub outcomes: Vec<QaOutcome>,
    pub summary: BenchSummary,
    pub predictions_path: PathBuf,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(output_error(path))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(output_error(path))?;
    }
    w.flush().map_err(output_error(path))
}

pub fn write_trace(path: &Path, outcomes: &[QaOutcome]) -> Result<(), RunError> {
    let lines = outcomes
        .iter()
        .map(|o| serde_json::to_string(o).expect("outcomes serialize"));
    write_lines(path, lines)
}

/// Run every question and write `predictions.txt`, `trace.jsonl` and
/// `summary.json` to `out_dir`. A replay that misses a fixture still writes
/// its outputs, then fails as a provider error.
pub fn run_bench(
    ws: &Workspace,
    questions_path: &Path,
    gold_path: &Path,
    out_dir: &Path,
    opts: &BenchOptions,
) -> Result<BenchRun, RunError> {
    ws.config.validate_for_bench()?;
    let questions = load_questions(questions_path)?;
    let gold = load_gold(gold_path)?;
    let index = eval::gold_index(&gold)?;
    if let Some(q) = questions.iter().find(|q| !index.contains_key(q.question_id.as_str())) {
        return Err(EvalError::MissingGold(q.question_id.clone()).into());
    }

    let mut handles: BTreeMap<String, DatasetHandle> = BTreeMap::new();
    for q in &questions {
        if handles.contains_key(&q.dataset_id) {
            continue;
        }
        if !ws.store.contains(&q.dataset_id)? {
            match &opts.data_dir {
                Some(dir) => {
                    ws.store.ingest(dir.join(format!("{}.csv", q.dataset_id)), &q.dataset_id)?;
                }
                None => return Err(DatasetError::UnknownDataset(q.dataset_id.clone()).into()),
            }
        }
        handles.insert(q.dataset_id.clone(), ws.resolve(&q.dataset_id)?);
    }
    let checksums = |hs: &BTreeMap<String, DatasetHandle>| -> Result<Vec<String>, RunError> {
        let mut all = Vec::new();
        for h in hs.values() {
            all.push(ws.store.table_checksum(h)?);
            if ws.config.lite {
                all.push(ws.store.table_checksum(&ws.store.handle(&h.dataset_id)?)?);
            }
        }
        Ok(all)
    };
    let before = checksums(&handles)?;

    let jobs: Vec<(QuestionRecord, DatasetHandle)> = questions
        .iter()
        .map(|q| (q.clone(), handles[&q.dataset_id].clone()))
        .collect();
    let outcomes = ws
        .pipeline()
        .run_batch(&jobs)
        .map_err(|e| RunError::Data(e.to_string()))?;
    let after = checksums(&handles)?;

    let scores = eval::score(&outcomes, &gold, opts.strict)?;
    let correct = scores.iter().filter(|&&ok| ok).count();
    let summary = BenchSummary {
        accuracy: if scores.is_empty() { 0.0 } else { correct as f64 / scores.len() as f64 },
        correct,
        strict: opts.strict,
        lite: ws.config.lite,
        mode: ws.config.mode,
        model: ws.config.model.clone(),
        tables_unchanged: before == after,
        report: report(&outcomes),
    };

    fs::create_dir_all(out_dir).map_err(output_error(out_dir))?;
    let predictions_path = out_dir.join("predictions.txt");
    let trace_path = out_dir.join("trace.jsonl");
    let summary_path = out_dir.join("summary.json");
    write_lines(&predictions_path, outcomes.iter().map(QaOutcome::prediction_line))?;
    write_trace(&trace_path, &outcomes)?;
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, body + "\n").map_err(output_error(&summary_path))?;

    let misses: Vec<&str> = outcomes
        .iter()
        .flat_map(|o| &o.attempts)
        .flat_map(|a| &a.provider_errors)
        .filter(|e| e.contains("replay_miss"))
        .map(String::as_str)
        .collect();
    if let Some(first) = misses.first() {
        return Err(RunError::Provider(format!(
            "{} replay miss(es); fixtures are stale or incomplete. First: {first}",
            misses.len()
        )));
    }
    if !outcomes.is_empty() && outcomes.iter().all(|o| failed_by_provider(o).is_some()) {
        let first = failed_by_provider(&outcomes[0]).unwrap_or_default();
        return Err(RunError::Provider(format!("every question failed at the provider. First: {first}")));
    }
    Ok(BenchRun {
        outcomes,
        summary,
        predictions_path,
        trace_path,
        summary_path,
    })
}

/// Message for a missing key in live mode, without echoing any value.
pub fn missing_key_hint() -> String {
    format!("set {API_KEY_ENV} to call a live provider, or use --replay with a fixture directory")
}
