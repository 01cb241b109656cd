//! Query execution against a dataset table.

use std::time::{Duration, Instant};

use rusqlite::ErrorCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gate::SqlQuery;
use crate::dataset::{DatasetError, DatasetHandle, DatasetStore, Value};

#[derive(Debug, Error)]
pub enum ExecError {
    /// Engine error text, carried verbatim.
    #[error("engine error: {0}")]
    Engine(String),
    #[error("unknown table or column: {0}")]
    UnknownObject(String),
    #[error("query exceeded {0} ms")]
    Timeout(u64),
    #[error("row_cap must be at least 1")]
    InvalidRowCap,
    #[error(transparent)]
    Store(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub truncated: bool,
    pub total_rows: u64,
}

fn classify(err: rusqlite::Error, timeout: Duration) -> ExecError {
    let message = match &err {
        rusqlite::Error::SqliteFailure(e, _) if e.code == ErrorCode::OperationInterrupted => {
            return ExecError::Timeout(timeout.as_millis() as u64);
        }
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        _ => err.to_string(),
    };
    if message.starts_with("no such table") || message.starts_with("no such column") {
        ExecError::UnknownObject(message)
    } else {
        ExecError::Engine(message)
    }
}

/// Run a validated query on a read-only connection. At most `row_cap` rows
/// are kept; the rest are only counted. Execution is interrupted once
/// `timeout` elapses.
pub fn execute(
    store: &DatasetStore,
    query: &SqlQuery,
    handle: &DatasetHandle,
    row_cap: usize,
    timeout: Duration,
) -> Result<QueryResult, ExecError> {
    if row_cap == 0 {
        return Err(ExecError::InvalidRowCap);
    }
    if let Some(other) = query
        .tables
        .iter()
        .find(|t| !t.eq_ignore_ascii_case(&handle.table_name))
    {
        return Err(ExecError::UnknownObject(format!(
            "no such table: {other} (dataset {} is table {})",
            handle.dataset_id, handle.table_name
        )));
    }
    let conn = store.read_connection()?;
    let started = Instant::now();
    conn.progress_handler(1_000, Some(move || started.elapsed() > timeout));

    let mut stmt = conn.prepare(&query.text).map_err(|e| classify(e, timeout))?;
    if !stmt.readonly() {
        return Err(ExecError::Engine("statement is not read-only".into()));
    }
    let headers: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
    let decls: Vec<Option<String>> = stmt
        .columns()
        .iter()
        .map(|c| c.decl_type().map(str::to_string))
        .collect();
    let mut rows = stmt.query([]).map_err(|e| classify(e, timeout))?;
    let mut kept = Vec::new();
    let mut total: u64 = 0;
    while let Some(row) = rows.next().map_err(|e| classify(e, timeout))? {
        total += 1;
        if kept.len() < row_cap {
            let mut cells = Vec::with_capacity(headers.len());
            for (i, decl) in decls.iter().enumerate() {
                let raw = row.get_ref(i).map_err(|e| classify(e, timeout))?;
                cells.push(Value::from_engine(raw, decl.as_deref()));
            }
            kept.push(cells);
        }
    }
    Ok(QueryResult {
        headers,
        truncated: total > kept.len() as u64,
        rows: kept,
        total_rows: total,
    })
}
