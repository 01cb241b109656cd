//! Curated question→SQL example pairs and cosine-similarity selection.
//!
//! The bank is small (a few dozen entries), so selection is an exact scan
//! over every entry of the requested mode.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{Gateway, LlmError};
use crate::par::{self, Execution};

/// Bundled example bank, loaded when no `bank_path` is configured.
pub const BUILTIN_BANK: &str = include_str!("../data/example_bank.toml");

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("embedding has dimension {found}, bank dimension is {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding must be non-empty, finite and not all zero")]
    InvalidEmbedding,
    #[error("zero-norm vector has no direction")]
    ZeroNorm,
    #[error("duplicate example for question {question:?} in mode {mode:?}")]
    Duplicate { question: String, mode: QueryMode },
    #[error("requested {k} examples of mode {mode:?} but the bank holds {available}")]
    NotEnoughExamples {
        k: usize,
        mode: QueryMode,
        available: usize,
    },
    #[error("invalid example {question:?}: {reason}")]
    InvalidExample { question: String, reason: String },
    #[error("cannot load bank file {path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("embedding failed: {0}")]
    Embedding(#[from] LlmError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternTag {
    Filtering,
    Aggregation,
    Grouping,
    Sorting,
    Join,
    Subquery,
    Conditional,
}

impl PatternTag {
    pub const ALL: [PatternTag; 7] = [
        PatternTag::Filtering,
        PatternTag::Aggregation,
        PatternTag::Grouping,
        PatternTag::Sorting,
        PatternTag::Join,
        PatternTag::Subquery,
        PatternTag::Conditional,
    ];
}

/// SQL policy: whole rows on the first pass, targeted values when
/// reprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    RowRetrieval,
    ValueTargeted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub question: String,
    pub sql: String,
    pub pattern_tag: PatternTag,
    pub mode: QueryMode,
}

impl ExamplePair {
    /// Non-empty fields; row-retrieval SQL starts with `SELECT *`,
    /// value-targeted SQL does not.
    pub fn check(&self) -> Result<(), BankError> {
        let invalid = |reason: &str| BankError::InvalidExample {
            question: self.question.clone(),
            reason: reason.to_string(),
        };
        if self.question.trim().is_empty() || self.sql.trim().is_empty() {
            return Err(invalid("question and sql must be non-empty"));
        }
        let head: String = self
            .sql
            .split_whitespace()
            .take(2)
            .collect::<Vec<_>>()
            .join(" ")
            .to_ascii_uppercase();
        let star = head == "SELECT *";
        match self.mode {
            QueryMode::RowRetrieval if !star => Err(invalid("row_retrieval sql must begin with SELECT *")),
            QueryMode::ValueTargeted if star || !head.starts_with("SELECT") => {
                Err(invalid("value_targeted sql must project specific columns or aggregates"))
            }
            _ => Ok(()),
        }
    }
}

/// A finite, non-empty, non-zero embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BankError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) || values.iter().all(|v| *v == 0.0) {
            return Err(BankError::InvalidEmbedding);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, BankError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, BankError> {
        cosine_similarity(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = BankError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, BankError> {
    if a.len() != b.len() {
        return Err(BankError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(BankError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug)]
struct Entry {
    pair: ExamplePair,
    embedding: EmbeddingVector,
}

/// A selected example with its similarity and insertion index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored<'a> {
    pub pair: &'a ExamplePair,
    pub similarity: f64,
    pub index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ExampleBank {
    dim: Option<usize>,
    entries: Vec<Entry>,
    keys: HashSet<(String, QueryMode)>,
}

impl ExampleBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn pairs(&self) -> impl Iterator<Item = &ExamplePair> {
        self.entries.iter().map(|e| &e.pair)
    }

    pub fn count_mode(&self, mode: QueryMode) -> usize {
        self.entries.iter().filter(|e| e.pair.mode == mode).count()
    }

    /// Append an example. The first insert fixes the bank dimension.
    pub fn add_example(&mut self, pair: ExamplePair, embedding: EmbeddingVector) -> Result<(), BankError> {
        if let Some(dim) = self.dim {
            if embedding.dim() != dim {
                return Err(BankError::DimensionMismatch {
                    expected: dim,
                    found: embedding.dim(),
                });
            }
        }
        let key = (pair.question.clone(), pair.mode);
        if self.keys.contains(&key) {
            return Err(BankError::Duplicate {
                question: pair.question,
                mode: pair.mode,
            });
        }
        self.dim = Some(embedding.dim());
        self.keys.insert(key);
        self.entries.push(Entry { pair, embedding });
        Ok(())
    }

    /// The `k` examples of `mode` most similar to `query`, best first. Exact
    /// ties keep insertion order.
    pub fn select_scored(
        &self,
        query: &EmbeddingVector,
        k: usize,
        mode: QueryMode,
    ) -> Result<Vec<Scored<'_>>, BankError> {
        let mut scored = Vec::new();
        for (index, entry) in self.entries.iter().enumerate() {
            if entry.pair.mode != mode {
                continue;
            }
            scored.push(Scored {
                pair: &entry.pair,
                similarity: query.cosine(&entry.embedding)?,
                index,
            });
        }
        if scored.len() < k {
            return Err(BankError::NotEnoughExamples {
                k,
                mode,
                available: scored.len(),
            });
        }
        // Stable sort keeps insertion order among equal similarities.
        scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn select_examples(
        &self,
        query: &EmbeddingVector,
        k: usize,
        mode: QueryMode,
    ) -> Result<Vec<&ExamplePair>, BankError> {
        Ok(self.select_scored(query, k, mode)?.into_iter().map(|s| s.pair).collect())
    }

    /// [`select_examples`](Self::select_examples) over many queries.
    pub fn select_batch(
        &self,
        exec: Execution,
        queries: &[EmbeddingVector],
        k: usize,
        mode: QueryMode,
    ) -> Vec<Result<Vec<&ExamplePair>, BankError>> {
        par::map(exec, queries, |q| self.select_examples(q, k, mode))
    }
}

#[derive(Deserialize)]
struct BankFile {
    #[serde(rename = "example", default)]
    examples: Vec<ExamplePair>,
}

/// Parse a bank file: a TOML document of `[[example]]` tables with
/// `question`, `sql`, `pattern_tag` and `mode`.
pub fn parse_bank(text: &str) -> Result<Vec<ExamplePair>, BankError> {
    let file: BankFile = toml::from_str(text).map_err(|e| BankError::Load {
        path: PathBuf::from("<bank>"),
        message: e.to_string(),
    })?;
    for pair in &file.examples {
        pair.check()?;
    }
    Ok(file.examples)
}

pub fn load_bank_file(path: &Path) -> Result<Vec<ExamplePair>, BankError> {
    let text = std::fs::read_to_string(path).map_err(|e| BankError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_bank(&text).map_err(|e| match e {
        BankError::Load { message, .. } => BankError::Load {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

#[derive(Serialize, Deserialize, Default)]
struct EmbeddingCache {
    embedder: String,
    entries: BTreeMap<String, Vec<f64>>,
}

fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Sidecar cache path for `bank_path` and an embedder id.
pub fn cache_path(bank_path: &Path, embedder_id: &str) -> PathBuf {
    let safe: String = embedder_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let mut name = bank_path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{safe}.embeddings.json"));
    bank_path.with_file_name(name)
}

/// Embed every question and build a frozen bank. With a `cache` path,
/// embeddings are read from and written back to that sidecar file, keyed by
/// the content hash of each question.
pub fn build_bank(
    pairs: Vec<ExamplePair>,
    gateway: &Gateway,
    cache: Option<&Path>,
) -> Result<ExampleBank, BankError> {
    let embedder = gateway.embedder_id();
    let mut stored = cache
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|s| serde_json::from_str::<EmbeddingCache>(&s).ok())
        .filter(|c| c.embedder == embedder)
        .unwrap_or_else(|| EmbeddingCache {
            embedder: embedder.clone(),
            entries: BTreeMap::new(),
        });
    let mut dirty = false;
    let mut bank = ExampleBank::new();
    for pair in pairs {
        pair.check()?;
        let key = content_hash(&pair.question);
        let embedding = match stored.entries.get(&key) {
            Some(v) => EmbeddingVector::new(v.clone())?,
            None => {
                let v = gateway.embed(&pair.question)?;
                stored.entries.insert(key, v.values().to_vec());
                dirty = true;
                v
            }
        };
        bank.add_example(pair, embedding)?;
    }
    if let (Some(path), true) = (cache, dirty) {
        match serde_json::to_string(&stored) {
            Ok(body) => {
                if let Err(e) = std::fs::write(path, body) {
                    log::warn!("could not write embedding cache {}: {e}", path.display());
                }
            }
            Err(e) => log::warn!("could not serialize embedding cache: {e}"),
        }
    }
    Ok(bank)
}
