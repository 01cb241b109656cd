//! Scoring predictions against gold answers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{AnswerValue, FinalStatus, QaOutcome};

pub const REL_TOL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub question_id: String,
    pub gold: AnswerValue,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no gold answer for question {0}")]
    MissingGold(String),
    #[error("duplicate gold answer for question {0}")]
    DuplicateGold(String),
}

fn numbers_match(a: f64, b: f64, strict: bool) -> bool {
    if strict {
        return a == b;
    }
    (a - b).abs() <= ABS_TOL.max(REL_TOL * a.abs().max(b.abs()))
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

fn categories_match(a: &str, b: &str, strict: bool) -> bool {
    if strict {
        a == b
    } else {
        fold(a) == fold(b)
    }
}

/// Whether `predicted` answers like `gold`. Numbers match within a relative
/// tolerance (absolute near zero), categories after trimming and case
/// folding, lists element-wise in order. Different variants never match.
/// `strict` turns every rule into exact equality.
pub fn compare_answer(predicted: &AnswerValue, gold: &AnswerValue, strict: bool) -> bool {
    use AnswerValue::*;
    match (predicted, gold) {
        (Boolean(a), Boolean(b)) => a == b,
        (Number(a), Number(b)) => numbers_match(*a, *b, strict),
        (Category(a), Category(b)) => categories_match(a, b, strict),
        (ListCategory(a), ListCategory(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| categories_match(x, y, strict))
        }
        (ListNumber(a), ListNumber(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| numbers_match(*x, *y, strict))
        }
        _ => false,
    }
}

pub fn gold_index(gold: &[GoldRecord]) -> Result<HashMap<&str, &AnswerValue>, EvalError> {
    let mut index = HashMap::with_capacity(gold.len());
    for g in gold {
        if index.insert(g.question_id.as_str(), &g.gold).is_some() {
            return Err(EvalError::DuplicateGold(g.question_id.clone()));
        }
    }
    Ok(index)
}

/// Per-outcome correctness in outcome order. Failed outcomes are incorrect
/// whatever their fallback answer.
pub fn score(outcomes: &[QaOutcome], gold: &[GoldRecord], strict: bool) -> Result<Vec<bool>, EvalError> {
    let index = gold_index(gold)?;
    outcomes
        .iter()
        .map(|o| {
            let g = index
                .get(o.question_id.as_str())
                .ok_or_else(|| EvalError::MissingGold(o.question_id.clone()))?;
            Ok(o.final_status != FinalStatus::Failed && compare_answer(&o.final_answer, g, strict))
        })
        .collect()
}

/// Fraction of correct outcomes; 0 for an empty run.
pub fn accuracy(outcomes: &[QaOutcome], gold: &[GoldRecord], strict: bool) -> Result<f64, EvalError> {
    let scores = score(outcomes, gold, strict)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().filter(|&&ok| ok).count() as f64 / scores.len() as f64)
}
