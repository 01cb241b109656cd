//! Gate, execute and serialize generated SQL.

pub mod exec;
pub mod gate;
pub mod serialize;

pub use exec::{execute, ExecError, QueryResult};
pub use gate::{extract_sql, validate_query, GateError, SqlQuery};
pub use serialize::{parse_serialized, serialize_result};

/// Default number of rows kept from a query.
pub const DEFAULT_ROW_CAP: usize = 50;
/// Default byte budget of a serialized result.
pub const DEFAULT_MAX_RESULT_BYTES: usize = 8192;
