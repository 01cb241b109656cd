//! Natural-language question answering over tabular data through generated
//! SQL.
//!
//! A question runs through five stages: similar examples are selected from
//! an [`ExampleBank`](bank::ExampleBank), a chat model writes a query, the
//! query is gated and executed read-only, a second prompt extracts a typed
//! answer from the rows, and a verifier flags malformed or irrelevant
//! answers. Flagged questions are run once more with value-targeted
//! prompting and merged back.
//!
//! Provider calls go through [`llm::Gateway`], which can record responses
//! and replay them later for fully offline, deterministic runs.

pub mod bank;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod llm;
pub mod par;
pub mod pipeline;
pub mod sql;

pub use bench::{RunError, Workspace};
pub use config::RunConfig;
pub use dataset::{DatasetHandle, DatasetStore};
pub use pipeline::{AnswerType, AnswerValue, Pipeline, QaOutcome, QuestionRecord};
