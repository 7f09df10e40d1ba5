//! Read-only SQLite execution with timeouts, and the result-equivalence
//! rules shared by voting and execution accuracy.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

pub use crate::sqltext::is_order_sensitive;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_ROW_LIMIT: usize = 10_000;
pub const WRITE_REFUSED: &str = "write statement refused";

/// Numbers are compared on a grid of this many units per 1.0.
const NUMERIC_SCALE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum CellValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

/// Canonical form of a cell. Two cells are equivalent iff their keys are equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellKey {
    Null,
    /// Value rounded to the nearest 1e-6.
    Number(i128),
    /// Reals too large for the fixed-point grid, keyed by bit pattern.
    WideReal(u64),
    Text(String),
    Blob(Vec<u8>),
}

impl CellValue {
    pub fn key(&self) -> CellKey {
        match self {
            Self::Null => CellKey::Null,
            Self::Integer(i) => CellKey::Number(*i as i128 * NUMERIC_SCALE as i128),
            Self::Real(r) => {
                let scaled = (r * NUMERIC_SCALE).round();
                if scaled.is_finite() && scaled.abs() < 1e36 {
                    CellKey::Number(scaled as i128)
                } else if r.is_nan() {
                    CellKey::Null
                } else {
                    CellKey::WideReal(r.to_bits())
                }
            }
            Self::Text(s) => CellKey::Text(s.clone()),
            Self::Blob(b) => CellKey::Blob(b.clone()),
        }
    }

    pub fn equivalent(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl From<ValueRef<'_>> for CellValue {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Self::Null,
            ValueRef::Integer(i) => Self::Integer(i),
            ValueRef::Real(r) => Self::Real(r),
            ValueRef::Text(t) => Self::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Self::Blob(b.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub column_count: usize,
    pub rows: Vec<Vec<CellValue>>,
    pub order_sensitive: bool,
}

impl ResultTable {
    /// Panics if a row does not have `column_count` cells.
    pub fn new(column_count: usize, rows: Vec<Vec<CellValue>>, order_sensitive: bool) -> Self {
        assert!(
            rows.iter().all(|r| r.len() == column_count),
            "every row must have {column_count} cells"
        );
        Self {
            column_count,
            rows,
            order_sensitive,
        }
    }

    pub fn keyed_rows(&self) -> Vec<Vec<CellKey>> {
        self.rows
            .iter()
            .map(|row| row.iter().map(CellValue::key).collect())
            .collect()
    }

    /// Rows as keys, sorted; the multiset form.
    pub fn sorted_keys(&self) -> Vec<Vec<CellKey>> {
        let mut rows = self.keyed_rows();
        rows.sort();
        rows
    }
}

/// Sequence comparison when either side is order sensitive, multiset
/// comparison otherwise.
pub fn results_equivalent(a: &ResultTable, b: &ResultTable) -> bool {
    if a.column_count != b.column_count || a.rows.len() != b.rows.len() {
        return false;
    }
    if a.order_sensitive || b.order_sensitive {
        a.rows
            .iter()
            .zip(&b.rows)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.equivalent(q)))
    } else {
        a.sorted_keys().cmp(&b.sorted_keys()) == Ordering::Equal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Success {
        result: ResultTable,
    },
    SqlError {
        message: String,
    },
    Timeout,
    /// More rows than the configured limit; never comparable.
    RowLimit,
}

impl ExecutionOutcome {
    pub fn success(&self) -> Option<&ResultTable> {
        match self {
            Self::Success { result } => Some(result),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("database file not found: {0}")]
    MissingDatabase(PathBuf),
    #[error("cannot open database {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
}

/// Execution settings shared by a worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqlRunner {
    pub timeout: Duration,
    pub row_limit: usize,
}

impl Default for SqlRunner {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            row_limit: DEFAULT_ROW_LIMIT,
        }
    }
}

impl SqlRunner {
    pub fn new(timeout: Duration) -> Self {
        Self {
            timeout,
            ..Self::default()
        }
    }

    pub fn open(&self, db_path: &Path) -> Result<Connection, ExecError> {
        if !db_path.is_file() {
            return Err(ExecError::MissingDatabase(db_path.to_path_buf()));
        }
        let open_err = |source| ExecError::Open {
            path: db_path.to_path_buf(),
            source,
        };
        let conn = Connection::open_with_flags(
            db_path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(open_err)?;
        conn.pragma_update(None, "query_only", true).map_err(open_err)?;
        Ok(conn)
    }

    /// Opens `db_path` read-only and runs one statement.
    pub fn execute(&self, db_path: &Path, sql: &str) -> Result<ExecutionOutcome, ExecError> {
        let conn = self.open(db_path)?;
        Ok(self.execute_on(&conn, sql))
    }

    /// Runs one statement on an already-open connection.
    pub fn execute_on(&self, conn: &Connection, sql: &str) -> ExecutionOutcome {
        let deadline = Instant::now() + self.timeout;
        // Returning true from the handler interrupts the statement.
        let _ = conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
        let outcome = self.run(conn, sql, deadline);
        let _ = conn.progress_handler(0, None::<fn() -> bool>);
        outcome
    }

    fn run(&self, conn: &Connection, sql: &str, deadline: Instant) -> ExecutionOutcome {
        let timed_out = |e: &rusqlite::Error| {
            e.sqlite_error_code() == Some(rusqlite::ErrorCode::OperationInterrupted) || Instant::now() >= deadline
        };
        let sql_error = |e: rusqlite::Error| {
            if timed_out(&e) {
                ExecutionOutcome::Timeout
            } else {
                ExecutionOutcome::SqlError { message: e.to_string() }
            }
        };
        let mut stmt = match conn.prepare(sql) {
            Ok(stmt) => stmt,
            Err(e) => return sql_error(e),
        };
        if !stmt.readonly() || stmt.column_count() == 0 {
            return ExecutionOutcome::SqlError {
                message: WRITE_REFUSED.to_string(),
            };
        }
        let column_count = stmt.column_count();
        let mut rows = match stmt.query([]) {
            Ok(rows) => rows,
            Err(e) => return sql_error(e),
        };
        let mut out = Vec::new();
        loop {
            match rows.next() {
                Ok(Some(row)) => {
                    if out.len() == self.row_limit {
                        return ExecutionOutcome::RowLimit;
                    }
                    let mut cells = Vec::with_capacity(column_count);
                    for i in 0..column_count {
                        match row.get_ref(i) {
                            Ok(v) => cells.push(CellValue::from(v)),
                            Err(e) => return sql_error(e),
                        }
                    }
                    out.push(cells);
                }
                Ok(None) => break,
                Err(e) => return sql_error(e),
            }
        }
        ExecutionOutcome::Success {
            result: ResultTable {
                column_count,
                rows: out,
                order_sensitive: is_order_sensitive(sql),
            },
        }
    }
}

/// Runs `sql` against the database at `db_path` with the default row limit.
pub fn execute_sql(db_path: &Path, sql: &str, timeout: Duration) -> Result<ExecutionOutcome, ExecError> {
    SqlRunner::new(timeout).execute(db_path, sql)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_db() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE singer (singer_id INTEGER PRIMARY KEY, name TEXT);
             INSERT INTO singer (name) VALUES ('a'),('b'),('c'),('d'),('e'),('f');",
        )
        .unwrap();
        (dir, path)
    }

    fn table(rows: Vec<Vec<CellValue>>, ordered: bool) -> ResultTable {
        let n = rows.first().map_or(1, Vec::len);
        ResultTable::new(n, rows, ordered)
    }

    #[test]
    fn counts_rows() {
        let (_dir, path) = fixture_db();
        let out = execute_sql(&path, "SELECT count(*) FROM singer", DEFAULT_TIMEOUT).unwrap();
        assert_eq!(out.success().unwrap().rows, vec![vec![CellValue::Integer(6)]]);
    }

    #[test]
    fn engine_errors_and_empty_results() {
        let (_dir, path) = fixture_db();
        let out = execute_sql(&path, "SELECT * FROM no_such_table", DEFAULT_TIMEOUT).unwrap();
        assert!(matches!(out, ExecutionOutcome::SqlError { .. }));
        let out = execute_sql(&path, "SELECT 1 WHERE 1=0", DEFAULT_TIMEOUT).unwrap();
        assert_eq!(out.success().unwrap().rows.len(), 0);
    }

    #[test]
    fn refuses_writes() {
        let (_dir, path) = fixture_db();
        for sql in [
            "DELETE FROM singer",
            "DROP TABLE singer",
            "BEGIN",
            "INSERT INTO singer (name) VALUES ('x')",
        ] {
            let out = execute_sql(&path, sql, DEFAULT_TIMEOUT).unwrap();
            assert!(matches!(out, ExecutionOutcome::SqlError { .. }), "{sql}: {out:?}");
        }
        let out = execute_sql(&path, "SELECT count(*) FROM singer", DEFAULT_TIMEOUT).unwrap();
        assert_eq!(out.success().unwrap().rows[0][0], CellValue::Integer(6));
    }

    #[test]
    fn missing_database_is_environment_error() {
        let err = execute_sql(Path::new("/nonexistent/x.sqlite"), "SELECT 1", DEFAULT_TIMEOUT);
        assert!(matches!(err, Err(ExecError::MissingDatabase(_))));
    }

    #[test]
    fn runaway_query_times_out() {
        let (_dir, path) = fixture_db();
        let sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c";
        let started = Instant::now();
        let out = execute_sql(&path, sql, Duration::from_millis(100)).unwrap();
        assert_eq!(out, ExecutionOutcome::Timeout);
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn row_limit_is_distinct_outcome() {
        let (_dir, path) = fixture_db();
        let runner = SqlRunner {
            row_limit: 20,
            ..SqlRunner::default()
        };
        let out = runner.execute(&path, "SELECT * FROM singer a, singer b").unwrap();
        assert_eq!(out, ExecutionOutcome::RowLimit);
        let out = runner.execute(&path, "SELECT * FROM singer").unwrap();
        assert!(out.success().is_some());
    }

    #[test]
    fn multiset_vs_sequence() {
        use CellValue::Integer as I;
        let a = table(vec![vec![I(1)], vec![I(2)]], false);
        let b = table(vec![vec![I(2)], vec![I(1)]], false);
        assert!(results_equivalent(&a, &b));
        let a_ord = ResultTable {
            order_sensitive: true,
            ..a.clone()
        };
        assert!(!results_equivalent(&a_ord, &b));
        let dup = table(vec![vec![I(1)], vec![I(1)]], false);
        assert!(!results_equivalent(&a, &dup));
    }

    #[test]
    fn integer_equals_real() {
        let a = table(vec![vec![CellValue::Integer(3)]], false);
        let b = table(vec![vec![CellValue::Real(3.0)]], false);
        assert!(results_equivalent(&a, &b));
        let c = table(vec![vec![CellValue::Real(3.0000004)]], false);
        assert!(results_equivalent(&a, &c));
        let d = table(vec![vec![CellValue::Real(3.00001)]], false);
        assert!(!results_equivalent(&a, &d));
        let text = table(vec![vec![CellValue::Text("3".into())]], false);
        assert!(!results_equivalent(&a, &text));
    }

    #[test]
    fn column_count_mismatch() {
        let a = ResultTable::new(1, vec![], false);
        let b = ResultTable::new(2, vec![], false);
        assert!(!results_equivalent(&a, &b));
    }
}
