//! Combining first-pass outcomes with reprocessed ones.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::outcome::QaOutcome;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MergeError {
    #[error("duplicate question id {0} in first-pass outcomes")]
    DuplicateFirstPass(String),
    #[error("duplicate question id {0} in reprocessed outcomes")]
    DuplicateReprocessed(String),
    #[error("reprocessed question {0} is not in the first pass")]
    UnknownId(String),
    #[error("reprocessed question {0} was not flagged in the first pass")]
    NotFlagged(String),
}

/// One outcome per first-pass id, in first-pass order. Flagged ids take
/// their reprocessed outcome when one exists; every other id keeps its
/// original outcome.
pub fn merge_results(first_pass: Vec<QaOutcome>, reprocessed: Vec<QaOutcome>) -> Result<Vec<QaOutcome>, MergeError> {
    let mut flagged = HashSet::new();
    let mut seen = HashSet::new();
    for o in &first_pass {
        if !seen.insert(o.question_id.as_str()) {
            return Err(MergeError::DuplicateFirstPass(o.question_id.clone()));
        }
        if o.needs_reprocess() {
            flagged.insert(o.question_id.as_str());
        }
    }
    let mut replacements: HashMap<String, QaOutcome> = HashMap::new();
    for o in reprocessed {
        if !seen.contains(o.question_id.as_str()) {
            return Err(MergeError::UnknownId(o.question_id));
        }
        if !flagged.contains(o.question_id.as_str()) {
            return Err(MergeError::NotFlagged(o.question_id));
        }
        if replacements.contains_key(&o.question_id) {
            return Err(MergeError::DuplicateReprocessed(o.question_id));
        }
        replacements.insert(o.question_id.clone(), o);
    }
    Ok(first_pass
        .into_iter()
        .map(|o| replacements.remove(&o.question_id).unwrap_or(o))
        .collect())
}
