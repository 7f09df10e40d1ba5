//! Spider-format schema and question loading, plus the two schema layouts
//! used in prompts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path} at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("database `{db_id}`: {message}")]
    Integrity { db_id: String, message: String },
    #[error("question record {index}: {message}")]
    Record { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(default)]
    pub declared_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }
}

/// A foreign key edge `from_table.from_column -> to_table.to_column`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FkRelation {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

impl FkRelation {
    pub fn new(from_table: &str, from_column: &str, to_table: &str, to_column: &str) -> Self {
        Self {
            from_table: from_table.to_string(),
            from_column: from_column.to_string(),
            to_table: to_table.to_string(),
            to_column: to_column.to_string(),
        }
    }

    /// `from_table.from_column = to_table.to_column`
    pub fn equation(&self) -> String {
        format!(
            "{}.{} = {}.{}",
            self.from_table, self.from_column, self.to_table, self.to_column
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<Table>,
    pub foreign_keys: Vec<FkRelation>,
    #[serde(default)]
    pub sqlite_path: PathBuf,
}

impl DatabaseSchema {
    /// Builds a schema and checks the naming and foreign-key invariants.
    pub fn new(
        db_id: impl Into<String>,
        tables: Vec<Table>,
        foreign_keys: Vec<FkRelation>,
    ) -> Result<Self, CatalogError> {
        let schema = Self {
            db_id: db_id.into(),
            tables,
            foreign_keys,
            sqlite_path: PathBuf::new(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_sqlite_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.sqlite_path = path.into();
        self
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let fail = |message: String| CatalogError::Integrity {
            db_id: self.db_id.clone(),
            message,
        };
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_lowercase()) {
                return Err(fail(format!("duplicate table `{}`", table.name)));
            }
            if table.columns.is_empty() {
                return Err(fail(format!("table `{}` has no columns", table.name)));
            }
            let mut cols = HashSet::new();
            for column in &table.columns {
                if column.name.trim().is_empty() {
                    return Err(fail(format!("table `{}` has an empty column name", table.name)));
                }
                if !cols.insert(column.name.to_lowercase()) {
                    return Err(fail(format!(
                        "duplicate column `{}` in table `{}`",
                        column.name, table.name
                    )));
                }
            }
        }
        for fk in &self.foreign_keys {
            for (t, c) in [(&fk.from_table, &fk.from_column), (&fk.to_table, &fk.to_column)] {
                if self.table(t).and_then(|table| table.column(c)).is_none() {
                    return Err(fail(format!("foreign key endpoint {t}.{c} does not exist")));
                }
            }
            if fk.from_table.eq_ignore_ascii_case(&fk.to_table) && fk.from_column.eq_ignore_ascii_case(&fk.to_column) {
                return Err(fail(format!("foreign key {} is a self loop", fk.equation())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Extra,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [Self::Easy, Self::Medium, Self::Hard, Self::Extra];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
            Self::Extra => "extra",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub db_id: String,
    pub text: String,
    pub gold_sql: Option<String>,
    pub difficulty: Option<Difficulty>,
}

impl Question {
    pub fn new(question_id: &str, db_id: &str, text: &str) -> Self {
        Self {
            question_id: question_id.to_string(),
            db_id: db_id.to_string(),
            text: text.to_string(),
            gold_sql: None,
            difficulty: None,
        }
    }
}

/// Read-only access to an ordered set of tables and foreign keys. Implemented
/// by full schemas and by linked sub-schemas.
pub trait SchemaView {
    fn table_count(&self) -> usize;
    /// Table name and its column names, in stored order.
    fn table_at(&self, index: usize) -> (&str, Vec<&str>);
    fn foreign_keys(&self) -> &[FkRelation];

    fn table_entries(&self) -> Vec<(&str, Vec<&str>)> {
        (0..self.table_count()).map(|i| self.table_at(i)).collect()
    }
}

impl SchemaView for DatabaseSchema {
    fn table_count(&self) -> usize {
        self.tables.len()
    }

    fn table_at(&self, index: usize) -> (&str, Vec<&str>) {
        let table = &self.tables[index];
        (table.name.as_str(), table.column_names().collect())
    }

    fn foreign_keys(&self) -> &[FkRelation] {
        &self.foreign_keys
    }
}

// --- Spider loaders ---

#[derive(Deserialize)]
struct SpiderDatabase {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    column_types: Vec<String>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CatalogError::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn convert_spider(db: SpiderDatabase) -> Result<DatabaseSchema, CatalogError> {
    let integrity = |message: String| CatalogError::Integrity {
        db_id: db.db_id.clone(),
        message,
    };
    let mut tables: Vec<Table> = db
        .table_names_original
        .iter()
        .map(|name| Table {
            name: name.clone(),
            columns: Vec::new(),
        })
        .collect();
    // Spider column index -> (table index, column index within table)
    let mut positions = Vec::with_capacity(db.column_names_original.len());
    for (i, (table_idx, name)) in db.column_names_original.iter().enumerate() {
        if *table_idx < 0 {
            positions.push(None);
            continue;
        }
        let table = tables
            .get_mut(*table_idx as usize)
            .ok_or_else(|| integrity(format!("column {i} refers to missing table {table_idx}")))?;
        positions.push(Some((*table_idx as usize, table.columns.len())));
        table.columns.push(Column {
            name: name.clone(),
            declared_type: db.column_types.get(i).cloned().unwrap_or_default(),
        });
    }
    let resolve = |idx: usize| -> Result<(String, String), CatalogError> {
        let (t, c) = positions
            .get(idx)
            .copied()
            .flatten()
            .ok_or_else(|| integrity(format!("foreign key refers to dangling column index {idx}")))?;
        Ok((tables[t].name.clone(), tables[t].columns[c].name.clone()))
    };
    let mut foreign_keys = Vec::with_capacity(db.foreign_keys.len());
    for &(from, to) in &db.foreign_keys {
        let (from_table, from_column) = resolve(from)?;
        let (to_table, to_column) = resolve(to)?;
        foreign_keys.push(FkRelation {
            from_table,
            from_column,
            to_table,
            to_column,
        });
    }
    DatabaseSchema::new(db.db_id.clone(), tables, foreign_keys)
}

/// Loads a Spider `tables.json`. Database files are expected at
/// `<dir of tables.json>/database/<db_id>/<db_id>.sqlite`; use
/// [`set_database_dir`] to point elsewhere.
pub fn load_spider_tables(path: impl AsRef<Path>) -> Result<Vec<DatabaseSchema>, CatalogError> {
    let path = path.as_ref();
    let raw: Vec<SpiderDatabase> = read_json(path)?;
    let db_dir = path.parent().unwrap_or_else(|| Path::new(".")).join("database");
    let mut schemas = raw.into_iter().map(convert_spider).collect::<Result<Vec<_>, _>>()?;
    set_database_dir(&mut schemas, &db_dir);
    Ok(schemas)
}

pub fn set_database_dir(schemas: &mut [DatabaseSchema], dir: &Path) {
    for schema in schemas {
        schema.sqlite_path = dir.join(&schema.db_id).join(format!("{}.sqlite", schema.db_id));
    }
}

#[derive(Deserialize)]
struct RawQuestion {
    #[serde(default)]
    question_id: Option<serde_json::Value>,
    question: Option<String>,
    db_id: Option<String>,
    #[serde(default)]
    query: Option<String>,
    #[serde(default, alias = "hardness")]
    difficulty: Option<Difficulty>,
}

/// Loads a Spider question file (`dev.json` style records).
pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>, CatalogError> {
    let raw: Vec<RawQuestion> = read_json(path.as_ref())?;
    raw.into_iter()
        .enumerate()
        .map(|(index, r)| {
            let missing = |field: &str| CatalogError::Record {
                index,
                message: format!("missing `{field}` field"),
            };
            let question_id = match r.question_id {
                Some(serde_json::Value::String(s)) => s,
                Some(other) => other.to_string(),
                None => index.to_string(),
            };
            Ok(Question {
                question_id,
                text: r.question.ok_or_else(|| missing("question"))?,
                db_id: r.db_id.ok_or_else(|| missing("db_id"))?,
                gold_sql: r.query,
                difficulty: r.difficulty,
            })
        })
        .collect()
}

// --- layouts ---

/// How each `# table ( ... )` line ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineEnd {
    /// `# t ( a )`
    Bare,
    /// `# t ( a );`
    #[default]
    Semicolon,
    /// `;` on every line except the last, which ends with `.`
    SemicolonLastPeriod,
}

/// Where foreign keys go relative to the table lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FkPlacement {
    Omit,
    /// `# a.b = c.d` lines directly after the tables.
    #[default]
    Inline,
    /// Same lines under a `Foreign keys:` header; header omitted when empty.
    Headed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClearLayout {
    pub line_end: LineEnd,
    pub foreign_keys: FkPlacement,
}

impl ClearLayout {
    pub const fn new(line_end: LineEnd, foreign_keys: FkPlacement) -> Self {
        Self { line_end, foreign_keys }
    }

    /// Renders the `#`-prefixed schema block without a trailing newline.
    pub fn render(&self, view: &dyn SchemaView) -> String {
        let mut lines = Vec::new();
        let count = view.table_count();
        for i in 0..count {
            let (name, columns) = view.table_at(i);
            let end = match self.line_end {
                LineEnd::Bare => "",
                LineEnd::Semicolon => ";",
                LineEnd::SemicolonLastPeriod if i + 1 == count => ".",
                LineEnd::SemicolonLastPeriod => ";",
            };
            lines.push(format!("# {name} ( {} ){end}", columns.join(", ")));
        }
        let fks = view.foreign_keys();
        match self.foreign_keys {
            FkPlacement::Omit => {}
            FkPlacement::Inline => lines.extend(fks.iter().map(|fk| format!("# {}", fk.equation()))),
            FkPlacement::Headed if fks.is_empty() => {}
            FkPlacement::Headed => {
                lines.push("Foreign keys:".to_string());
                lines.extend(fks.iter().map(|fk| format!("# {}", fk.equation())));
            }
        }
        lines.join("\n")
    }
}

/// Clear layout with `;`-terminated table lines and inline foreign keys.
pub fn serialize_clear_layout(view: &dyn SchemaView) -> String {
    ClearLayout::default().render(view)
}

pub const COMPLICATED_INSTRUCTION: &str = "Complete sqlite SQL query only and with no explanation.";

/// Instruction, question and flattened `table : table.col , ...` context on
/// one line, followed by `SELECT` on its own line.
pub fn serialize_complicated_layout(view: &dyn SchemaView, question: &Question) -> String {
    let segments: Vec<String> = view
        .table_entries()
        .into_iter()
        .map(|(table, columns)| {
            let qualified: Vec<String> = columns.iter().map(|c| format!("{table}.{c}")).collect();
            format!("{table} : {}", qualified.join(" , "))
        })
        .collect();
    let mut out = String::new();
    let _ = write!(
        out,
        "{COMPLICATED_INSTRUCTION} {} Sqlite SQL tables, with their properties: {}\nSELECT",
        question.text,
        segments.join(" | ")
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(name: &str, cols: &[&str]) -> Table {
        Table {
            name: name.into(),
            columns: cols
                .iter()
                .map(|c| Column {
                    name: c.to_string(),
                    declared_type: String::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn single_table_clear_line() {
        let schema = DatabaseSchema::new("x", vec![table("t", &["a"])], vec![]).unwrap();
        assert_eq!(serialize_clear_layout(&schema), "# t ( a );");
    }

    #[test]
    fn single_table_complicated() {
        let schema = DatabaseSchema::new("x", vec![table("t", &["a"])], vec![]).unwrap();
        let q = Question::new("0", "x", "q?");
        assert!(serialize_complicated_layout(&schema, &q).ends_with(" t : t.a\nSELECT"));
    }

    #[test]
    fn rejects_duplicate_tables_case_insensitively() {
        let err = DatabaseSchema::new("x", vec![table("t", &["a"]), table("T", &["b"])], vec![]);
        assert!(matches!(err, Err(CatalogError::Integrity { .. })));
    }

    #[test]
    fn rejects_unresolvable_fk() {
        let fk = FkRelation::new("t", "a", "u", "b");
        let err = DatabaseSchema::new("x", vec![table("t", &["a"])], vec![fk]);
        assert!(matches!(err, Err(CatalogError::Integrity { .. })));
    }

    #[test]
    fn headed_fks_omitted_when_empty() {
        let schema = DatabaseSchema::new("x", vec![table("t", &["a", "b"])], vec![]).unwrap();
        let layout = ClearLayout::new(LineEnd::Bare, FkPlacement::Headed);
        assert_eq!(layout.render(&schema), "# t ( a, b )");
    }

    #[test]
    fn byte_offset_from_line_and_column() {
        let text = "[\n  {,\n]";
        let err = serde_json::from_str::<serde_json::Value>(text).unwrap_err();
        assert_eq!(&text[byte_offset(text, err.line(), err.column())..][..1], ",");
    }
}
