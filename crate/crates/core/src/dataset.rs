//! Tabular dataset ingestion into an embedded SQLite database.
//!
//! Each ingested file becomes one table. Column types are inferred by
//! scanning every value, and the mapping from original header names to the
//! sanitized SQL identifiers is kept in a metadata table so later runs can
//! reopen the same database file.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::types::ValueRef;
use rusqlite::{params, Connection, OpenFlags, OptionalExtension};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const META_TABLE: &str = "_tabqa_datasets";

/// Default row cap for Lite variants.
pub const LITE_MAX_ROWS: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited file {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("empty dataset: {0} has a header but no data rows")]
    EmptyDataset(PathBuf),
    #[error("row arity mismatch at line {line}: expected {expected} fields, found {found}")]
    ArityMismatch {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("dataset id {0:?} is already ingested")]
    DuplicateId(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt dataset metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Inferred SQL-facing type of a column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Integer,
    Real,
    Text,
    Boolean,
    Date,
}

impl ColumnType {
    /// Declared type used in the generated DDL. `BOOLEAN` and `DATE` are kept
    /// as declared types so results can be rendered by column.
    pub fn sql_decl(self) -> &'static str {
        match self {
            ColumnType::Integer => "INTEGER",
            ColumnType::Real => "REAL",
            ColumnType::Text => "TEXT",
            ColumnType::Boolean => "BOOLEAN",
            ColumnType::Date => "DATE",
        }
    }

    fn from_decl(decl: &str) -> Option<ColumnType> {
        match decl.to_ascii_uppercase().as_str() {
            "INTEGER" => Some(ColumnType::Integer),
            "REAL" => Some(ColumnType::Real),
            "TEXT" => Some(ColumnType::Text),
            "BOOLEAN" => Some(ColumnType::Boolean),
            "DATE" => Some(ColumnType::Date),
            _ => None,
        }
    }
}

/// A single cell as read back from the engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Bool(bool),
    Blob(Vec<u8>),
}

impl Value {
    /// Convert an engine value, using the column's declared type (when the
    /// result column maps directly onto a table column) to restore booleans.
    pub fn from_engine(raw: ValueRef<'_>, decl_type: Option<&str>) -> Value {
        let decl = decl_type.and_then(ColumnType::from_decl);
        match raw {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) if decl == Some(ColumnType::Boolean) => Value::Bool(i != 0),
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(f) => Value::Real(f),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(x) => f.write_str(&format_real(*x)),
            Value::Text(s) => f.write_str(s),
            Value::Bool(true) => f.write_str("True"),
            Value::Bool(false) => f.write_str("False"),
            Value::Blob(b) => write!(f, "<blob {} bytes>", b.len()),
        }
    }
}

/// Reals always carry a fractional part so they stay distinguishable from
/// integers in prompts ("3.0", not "3").
pub fn format_real(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

/// Reference to one ingested table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHandle {
    pub dataset_id: String,
    pub table_name: String,
    pub row_count: u64,
    pub origin_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// Header text as it appeared in the source file.
    pub original_name: String,
    pub inferred_type: ColumnType,
}

/// Columns plus a few leading rows, used to ground SQL prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_name: String,
    pub columns: Vec<Column>,
    pub sample_rows: Vec<Vec<Value>>,
}

impl TableSchema {
    /// Prompt rendering for the `{table_info}` placeholder: DDL followed by a
    /// commented block of sample rows.
    pub fn table_info(&self) -> String {
        let mut out = format!("\nCREATE TABLE {} (\n", self.table_name);
        let defs: Vec<String> = self
            .columns
            .iter()
            .map(|c| format!("\t\"{}\" {}", c.name, c.inferred_type.sql_decl()))
            .collect();
        out.push_str(&defs.join(",\n"));
        out.push_str("\n)\n");
        out.push_str(&format!(
            "\n/*\n{} rows from {} table:\n",
            self.sample_rows.len(),
            self.table_name
        ));
        let header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        out.push_str(&header.join("\t"));
        for row in &self.sample_rows {
            out.push('\n');
            let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
            out.push_str(&cells.join("\t"));
        }
        out.push_str("\n*/");
        out
    }

    /// Prompt rendering for `{column_headers}`.
    pub fn column_headers(&self) -> String {
        let names: Vec<String> = self.columns.iter().map(|c| format!("'{}'", c.name)).collect();
        format!("[{}]", names.join(", "))
    }

    pub fn with_sample_rows(&self, n: usize) -> TableSchema {
        TableSchema {
            sample_rows: self.sample_rows.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Replace non-identifier characters with `_` so generated SQL can name the
/// column verbatim.
pub fn sanitize_identifier(raw: &str) -> String {
    let mut out: String = raw
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() {
        out.push_str("col");
    }
    if out.starts_with(|c: char| c.is_ascii_digit()) {
        out.insert(0, '_');
    }
    out
}

/// Sanitize all headers, suffixing `_2`, `_3`, ... on (case-insensitive)
/// collisions.
pub fn sanitize_headers(headers: &[String]) -> Vec<String> {
    let mut used: HashSet<String> = HashSet::new();
    headers
        .iter()
        .map(|h| {
            let base = sanitize_identifier(h);
            let mut candidate = base.clone();
            let mut n = 2;
            while !used.insert(candidate.to_ascii_lowercase()) {
                candidate = format!("{base}_{n}");
                n += 1;
            }
            candidate
        })
        .collect()
}

fn is_bool_literal(v: &str) -> bool {
    matches!(v.to_ascii_lowercase().as_str(), "true" | "false" | "0" | "1")
}

fn parse_bool_literal(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

fn is_integer_literal(v: &str) -> bool {
    v.parse::<i64>().is_ok()
}

fn is_real_literal(v: &str) -> bool {
    // Reject "inf", "NaN" and friends that `f64::from_str` accepts.
    v.chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
        && v.chars().any(|c| c.is_ascii_digit())
        && v.parse::<f64>().map(f64::is_finite).unwrap_or(false)
}

fn is_date_literal(v: &str) -> bool {
    let b = v.as_bytes();
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    if b.len() < 10 || !digits(0..4) || b[4] != b'-' || !digits(5..7) || b[7] != b'-' || !digits(8..10)
    {
        return false;
    }
    let month: u32 = v[5..7].parse().unwrap_or(0);
    let day: u32 = v[8..10].parse().unwrap_or(0);
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return false;
    }
    match b.len() {
        10 => true,
        // "YYYY-MM-DD HH:MM:SS" with an optional trailing fraction or zone
        n if n >= 19 => {
            (b[10] == b' ' || b[10] == b'T')
                && digits(11..13)
                && b[13] == b':'
                && digits(14..16)
                && b[16] == b':'
                && digits(17..19)
        }
        _ => false,
    }
}

/// Infer a column type from its raw cells. Empty cells are ignored; a column
/// with no non-empty cells is text.
pub fn infer_column_type<'a, I>(values: I) -> ColumnType
where
    I: IntoIterator<Item = &'a str>,
{
    let (mut all_bool, mut all_int, mut all_real, mut all_date) = (true, true, true, true);
    let mut seen = false;
    for raw in values {
        let v = raw.trim();
        if v.is_empty() {
            continue;
        }
        seen = true;
        all_bool &= is_bool_literal(v);
        all_int &= is_integer_literal(v);
        all_real &= all_int || is_real_literal(v);
        all_date &= is_date_literal(v);
        if !(all_bool || all_int || all_real || all_date) {
            return ColumnType::Text;
        }
    }
    if !seen {
        ColumnType::Text
    } else if all_bool {
        ColumnType::Boolean
    } else if all_int {
        ColumnType::Integer
    } else if all_real {
        ColumnType::Real
    } else if all_date {
        ColumnType::Date
    } else {
        ColumnType::Text
    }
}

/// Convert a raw cell into the value stored for a column of type `ty`.
/// Assumes `ty` was inferred from a set containing `raw`.
fn typed_cell(raw: &str, ty: ColumnType) -> rusqlite::types::Value {
    use rusqlite::types::Value as Sql;
    let v = raw.trim();
    if ty != ColumnType::Text && v.is_empty() {
        return Sql::Null;
    }
    match ty {
        ColumnType::Integer => v.parse().map(Sql::Integer).unwrap_or(Sql::Null),
        ColumnType::Real => v.parse().map(Sql::Real).unwrap_or(Sql::Null),
        ColumnType::Boolean => parse_bool_literal(v)
            .map(|b| Sql::Integer(b as i64))
            .unwrap_or(Sql::Null),
        ColumnType::Date => Sql::Text(v.to_string()),
        ColumnType::Text => Sql::Text(raw.to_string()),
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    columns: Vec<Column>,
}

/// An embedded database holding every ingested dataset of a run.
///
/// Ingestion goes through a single writer connection guarded by a mutex;
/// queries open their own read-only connections and may run concurrently.
pub struct DatasetStore {
    path: PathBuf,
    writer: Mutex<Connection>,
}

impl fmt::Debug for DatasetStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DatasetStore").field("path", &self.path).finish()
    }
}

impl DatasetStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let conn = Connection::open(&path)?;
        conn.execute_batch(&format!(
            "CREATE TABLE IF NOT EXISTS {META_TABLE} (
                dataset_id TEXT PRIMARY KEY,
                table_name TEXT NOT NULL UNIQUE,
                row_count INTEGER NOT NULL,
                origin_path TEXT NOT NULL,
                meta TEXT NOT NULL
            )"
        ))?;
        Ok(Self {
            path,
            writer: Mutex::new(conn),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Open a fresh read-only connection for query execution.
    pub fn read_connection(&self) -> Result<Connection> {
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        conn.execute_batch("PRAGMA query_only = ON")?;
        Ok(conn)
    }

    fn writer(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Load a comma-delimited file with a header row into a new table.
    pub fn ingest(&self, source: impl AsRef<Path>, dataset_id: &str) -> Result<DatasetHandle> {
        let source = source.as_ref();
        if dataset_id.trim().is_empty() {
            return Err(DatasetError::InvalidArgument("dataset id must not be empty".into()));
        }
        let file = std::fs::File::open(source).map_err(|e| DatasetError::Io {
            path: source.to_path_buf(),
            source: e,
        })?;
        let csv_err = |e: csv::Error| DatasetError::Csv {
            path: source.to_path_buf(),
            source: e,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(file);
        let headers: Vec<String> = reader
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(|h| h.trim_start_matches('\u{feff}').to_string())
            .collect();
        let mut rows: Vec<Vec<String>> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            if record.len() != headers.len() {
                return Err(DatasetError::ArityMismatch {
                    line: record.position().map(|p| p.line()).unwrap_or(0),
                    expected: headers.len(),
                    found: record.len(),
                });
            }
            rows.push(record.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(DatasetError::EmptyDataset(source.to_path_buf()));
        }

        let names = sanitize_headers(&headers);
        let columns: Vec<Column> = names
            .into_iter()
            .zip(&headers)
            .enumerate()
            .map(|(i, (name, original))| Column {
                name,
                original_name: original.clone(),
                inferred_type: infer_column_type(rows.iter().map(|r| r[i].as_str())),
            })
            .collect();

        let mut conn = self.writer();
        if lookup(&conn, dataset_id)?.is_some() {
            return Err(DatasetError::DuplicateId(dataset_id.to_string()));
        }
        let table_name = unique_table_name(&conn, &format!("ds_{}", sanitize_identifier(dataset_id)))?;
        let tx = conn.transaction()?;
        tx.execute_batch(&create_table_sql(&table_name, &columns))?;
        {
            let placeholders = vec!["?"; columns.len()].join(", ");
            let mut insert =
                tx.prepare(&format!("INSERT INTO \"{table_name}\" VALUES ({placeholders})"))?;
            for row in &rows {
                let values: Vec<rusqlite::types::Value> = row
                    .iter()
                    .zip(&columns)
                    .map(|(raw, col)| typed_cell(raw, col.inferred_type))
                    .collect();
                insert.execute(rusqlite::params_from_iter(values))?;
            }
        }
        let handle = DatasetHandle {
            dataset_id: dataset_id.to_string(),
            table_name,
            row_count: rows.len() as u64,
            origin_path: source.to_path_buf(),
        };
        insert_meta(&tx, &handle, &columns)?;
        tx.commit()?;
        log::info!(
            "ingested {} as {} ({} rows, {} columns)",
            handle.dataset_id,
            handle.table_name,
            handle.row_count,
            columns.len()
        );
        Ok(handle)
    }

    pub fn handle(&self, dataset_id: &str) -> Result<DatasetHandle> {
        let conn = self.writer();
        lookup(&conn, dataset_id)?
            .map(|(h, _)| h)
            .ok_or_else(|| DatasetError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn contains(&self, dataset_id: &str) -> Result<bool> {
        Ok(lookup(&self.writer(), dataset_id)?.is_some())
    }

    pub fn list(&self) -> Result<Vec<DatasetHandle>> {
        let conn = self.writer();
        let mut stmt = conn.prepare(&format!(
            "SELECT dataset_id, table_name, row_count, origin_path FROM {META_TABLE} ORDER BY dataset_id"
        ))?;
        let rows = stmt.query_map([], |r| {
            Ok(DatasetHandle {
                dataset_id: r.get(0)?,
                table_name: r.get(1)?,
                row_count: r.get::<_, i64>(2)? as u64,
                origin_path: PathBuf::from(r.get::<_, String>(3)?),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    fn columns(&self, handle: &DatasetHandle) -> Result<Vec<Column>> {
        let conn = self.writer();
        lookup(&conn, &handle.dataset_id)?
            .map(|(_, cols)| cols)
            .ok_or_else(|| DatasetError::UnknownDataset(handle.dataset_id.clone()))
    }

    /// Derive a table holding the first `min(row_count, max_rows)` rows in
    /// file order. Repeated calls return the already-derived handle.
    pub fn sample_lite(&self, handle: &DatasetHandle, max_rows: usize) -> Result<DatasetHandle> {
        if max_rows == 0 {
            return Err(DatasetError::InvalidArgument("max_rows must be at least 1".into()));
        }
        let columns = self.columns(handle)?;
        let derived_id = format!("{}#lite{max_rows}", handle.dataset_id);
        let mut conn = self.writer();
        if let Some((existing, _)) = lookup(&conn, &derived_id)? {
            return Ok(existing);
        }
        let table_name = unique_table_name(&conn, &format!("{}_lite{max_rows}", handle.table_name))?;
        let tx = conn.transaction()?;
        tx.execute_batch(&create_table_sql(&table_name, &columns))?;
        let copied = tx.execute(
            &format!(
                "INSERT INTO \"{table_name}\" SELECT * FROM \"{}\" ORDER BY rowid LIMIT ?1",
                handle.table_name
            ),
            params![max_rows as i64],
        )?;
        let derived = DatasetHandle {
            dataset_id: derived_id,
            table_name,
            row_count: copied as u64,
            origin_path: handle.origin_path.clone(),
        };
        insert_meta(&tx, &derived, &columns)?;
        tx.commit()?;
        Ok(derived)
    }

    /// Columns in source order plus the first `sample_n` rows.
    pub fn schema_info(&self, handle: &DatasetHandle, sample_n: usize) -> Result<TableSchema> {
        let columns = self.columns(handle)?;
        let (_, sample_rows) = self.fetch_rows(handle, Some(sample_n))?;
        Ok(TableSchema {
            table_name: handle.table_name.clone(),
            columns,
            sample_rows,
        })
    }

    /// Every row of the table in insertion order.
    pub fn fetch_all(&self, handle: &DatasetHandle) -> Result<(Vec<String>, Vec<Vec<Value>>)> {
        self.fetch_rows(handle, None)
    }

    fn fetch_rows(
        &self,
        handle: &DatasetHandle,
        limit: Option<usize>,
    ) -> Result<(Vec<String>, Vec<Vec<Value>>)> {
        let conn = self.read_connection()?;
        let limit = limit.map(|n| n as i64).unwrap_or(-1);
        let mut stmt = conn
            .prepare(&format!(
                "SELECT * FROM \"{}\" ORDER BY rowid LIMIT ?1",
                handle.table_name
            ))
            .map_err(|e| match e {
                rusqlite::Error::SqliteFailure(_, Some(ref m)) if m.contains("no such table") => {
                    DatasetError::UnknownDataset(handle.dataset_id.clone())
                }
                other => other.into(),
            })?;
        let decls: Vec<Option<String>> = stmt
            .columns()
            .iter()
            .map(|c| c.decl_type().map(str::to_string))
            .collect();
        let headers: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        let mut rows = stmt.query(params![limit])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut cells = Vec::with_capacity(decls.len());
            for (i, decl) in decls.iter().enumerate() {
                cells.push(Value::from_engine(row.get_ref(i)?, decl.as_deref()));
            }
            out.push(cells);
        }
        Ok((headers, out))
    }

    /// SHA-256 over the full table contents in rowid order.
    pub fn table_checksum(&self, handle: &DatasetHandle) -> Result<String> {
        let (headers, rows) = self.fetch_all(handle)?;
        let mut hasher = Sha256::new();
        hasher.update(headers.join("\u{1f}").as_bytes());
        for row in rows {
            hasher.update(b"\x1e");
            for cell in row {
                hasher.update(format!("{cell:?}\u{1f}").as_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn create_table_sql(table: &str, columns: &[Column]) -> String {
    let defs: Vec<String> = columns
        .iter()
        .map(|c| format!("\"{}\" {}", c.name, c.inferred_type.sql_decl()))
        .collect();
    format!("CREATE TABLE \"{table}\" ({})", defs.join(", "))
}

fn insert_meta(conn: &Connection, handle: &DatasetHandle, columns: &[Column]) -> Result<()> {
    let meta = serde_json::to_string(&DatasetMeta {
        columns: columns.to_vec(),
    })
    .map_err(|e| DatasetError::Metadata(e.to_string()))?;
    conn.execute(
        &format!(
            "INSERT INTO {META_TABLE} (dataset_id, table_name, row_count, origin_path, meta)
             VALUES (?1, ?2, ?3, ?4, ?5)"
        ),
        params![
            handle.dataset_id,
            handle.table_name,
            handle.row_count as i64,
            handle.origin_path.to_string_lossy(),
            meta
        ],
    )?;
    Ok(())
}

fn lookup(conn: &Connection, dataset_id: &str) -> Result<Option<(DatasetHandle, Vec<Column>)>> {
    let row = conn
        .query_row(
            &format!(
                "SELECT table_name, row_count, origin_path, meta FROM {META_TABLE} WHERE dataset_id = ?1"
            ),
            params![dataset_id],
            |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, i64>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                ))
            },
        )
        .optional()?;
    let Some((table_name, row_count, origin, meta)) = row else {
        return Ok(None);
    };
    let meta: DatasetMeta =
        serde_json::from_str(&meta).map_err(|e| DatasetError::Metadata(e.to_string()))?;
    Ok(Some((
        DatasetHandle {
            dataset_id: dataset_id.to_string(),
            table_name,
            row_count: row_count as u64,
            origin_path: PathBuf::from(origin),
        },
        meta.columns,
    )))
}

fn unique_table_name(conn: &Connection, base: &str) -> Result<String> {
    let base = base.to_ascii_lowercase();
    let mut candidate = base.clone();
    let mut n = 2;
    loop {
        let taken: bool = conn.query_row(
            "SELECT EXISTS (SELECT 1 FROM sqlite_master WHERE lower(name) = lower(?1))",
            params![candidate],
            |r| r.get(0),
        )?;
        if !taken {
            return Ok(candidate);
        }
        candidate = format!("{base}_{n}");
        n += 1;
    }
}
