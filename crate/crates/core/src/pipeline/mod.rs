//! Question answering over one table per question.

pub mod answer;
pub mod merge;
pub mod outcome;
pub mod runner;
pub mod verify;

pub use answer::{parse_answer, AnswerParseError, AnswerType, AnswerValue};
pub use merge::{merge_results, MergeError};
pub use outcome::{AttemptRecord, FinalStatus, QaOutcome, QuestionRecord};
pub use runner::{Pipeline, PipelineConfig};
pub use verify::{interpret_reply, Decision, VerificationVerdict, Verifier};
