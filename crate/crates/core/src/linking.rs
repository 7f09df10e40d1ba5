//! Table and column recall through sampled LLM rankings, with set and
//! frequency voting over the samples.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::catalog::{ClearLayout, DatabaseSchema, FkPlacement, FkRelation, LineEnd, Question, SchemaView};
use crate::gateway::{complete_checked, ChatBackend, ChatExchange, ChatMessage, GatewayError};
use crate::scalar::Score;

pub const TABLE_RECALL_INSTRUCTION: &str = "\
Given the database schema and question, perform the following actions:
1 - Rank all the tables based on the possibility of being used in the SQL according to the question from the most relevant to the least relevant, Table or its column that matches more with the question words is highly relevant and must be placed ahead.
2 - Check whether you consider all the tables.
3 - Output a list object in the order of step 2, Your output should contain all the tables. The format should be like:
[
\"table_1\", \"table_2\", ...
]";

pub const COLUMN_RECALL_INSTRUCTION: &str = "\
Given the database tables and question, perform the following actions:
1 - Rank the columns in each table based on the possibility of being used in the SQL, Column that matches more with the question words or the foreign key is highly relevant and must be placed ahead. You should output them in the order of the most relevant to the least relevant.
Explain why you choose each column.
2 - Output a JSON object that contains all the columns in each table according to your explanation. The format should be like:
{
    \"table_1\": [\"column_1\", \"column_2\", ......],
    \"table_2\": [\"column_1\", \"column_2\", ......],
    \"table_3\": [\"column_1\", \"column_2\", ......],
     ......
}";

const RECALL_LAYOUT: ClearLayout = ClearLayout::new(LineEnd::Bare, FkPlacement::Headed);

#[derive(Debug, Clone, PartialEq)]
pub struct LinkingConfig {
    pub k_tables: usize,
    pub k_columns: usize,
    pub recall_samples: u32,
    pub temperature: f64,
    pub model_name: String,
    pub max_output_tokens: u32,
}

impl Default for LinkingConfig {
    fn default() -> Self {
        Self {
            k_tables: 4,
            k_columns: 5,
            recall_samples: 10,
            temperature: 1.0,
            model_name: "gpt-3.5-turbo-0301".into(),
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedTable {
    pub name: String,
    pub columns: Vec<String>,
}

/// The recalled subset of a schema handed to the generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSchema {
    pub db_id: String,
    pub tables: Vec<LinkedTable>,
    pub foreign_keys: Vec<FkRelation>,
}

impl SchemaView for LinkedSchema {
    fn table_count(&self) -> usize {
        self.tables.len()
    }

    fn table_at(&self, index: usize) -> (&str, Vec<&str>) {
        let t = &self.tables[index];
        (t.name.as_str(), t.columns.iter().map(String::as_str).collect())
    }

    fn foreign_keys(&self) -> &[FkRelation] {
        &self.foreign_keys
    }
}

impl LinkedSchema {
    /// Builds a view of `tables` (with all their columns) and the foreign
    /// keys whose two endpoint tables are both present.
    pub fn with_all_columns(schema: &DatabaseSchema, tables: &[String]) -> Self {
        let tables: Vec<LinkedTable> = tables
            .iter()
            .filter_map(|name| schema.table(name))
            .map(|t| LinkedTable {
                name: t.name.clone(),
                columns: t.column_names().map(str::to_string).collect(),
            })
            .collect();
        let foreign_keys = fks_within(schema, &tables);
        Self {
            db_id: schema.db_id.clone(),
            tables,
            foreign_keys,
        }
    }

    pub fn without_foreign_keys(&self) -> Self {
        Self {
            foreign_keys: Vec::new(),
            ..self.clone()
        }
    }

    /// True when every table, column and foreign key exists in `schema`,
    /// without duplicates.
    pub fn is_substructure_of(&self, schema: &DatabaseSchema) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.tables.iter().all(|lt| {
            let Some(table) = schema.table(&lt.name) else {
                return false;
            };
            let mut cols = std::collections::HashSet::new();
            seen.insert(lt.name.to_lowercase())
                && lt
                    .columns
                    .iter()
                    .all(|c| table.column(c).is_some() && cols.insert(c.to_lowercase()))
        }) && self.foreign_keys.iter().all(|fk| {
            schema.foreign_keys.contains(fk)
                && self.table(&fk.from_table).is_some()
                && self.table(&fk.to_table).is_some()
        })
    }

    pub fn table(&self, name: &str) -> Option<&LinkedTable> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }
}

fn fks_within(schema: &DatabaseSchema, tables: &[LinkedTable]) -> Vec<FkRelation> {
    let linked = |name: &str| tables.iter().any(|t| t.name.eq_ignore_ascii_case(name));
    schema
        .foreign_keys
        .iter()
        .filter(|fk| linked(&fk.from_table) && linked(&fk.to_table))
        .cloned()
        .collect()
}

/// Fraction of recall samples in which each schema item was recalled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Score")]
pub struct RecallScores<S> {
    pub table_scores: BTreeMap<String, S>,
    pub column_scores: BTreeMap<String, BTreeMap<String, S>>,
}

impl<S: Score> RecallScores<S> {
    /// All-zero scores covering every table and column of `schema`.
    pub fn zeros(schema: &DatabaseSchema) -> Self {
        Self {
            table_scores: schema.tables.iter().map(|t| (t.name.clone(), S::zero())).collect(),
            column_scores: schema
                .tables
                .iter()
                .map(|t| {
                    let cols = t.columns.iter().map(|c| (c.name.clone(), S::zero())).collect();
                    (t.name.clone(), cols)
                })
                .collect(),
        }
    }

    pub fn table(&self, table: &str) -> S {
        self.table_scores.get(table).copied().unwrap_or_else(S::zero)
    }

    pub fn column(&self, table: &str, column: &str) -> S {
        self.column_scores
            .get(table)
            .and_then(|cols| cols.get(column))
            .copied()
            .unwrap_or_else(S::zero)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("no recall sample named any table")]
    NoTables,
}

fn recall_exchange(content: String, config: &LinkingConfig) -> ChatExchange {
    ChatExchange {
        messages: vec![ChatMessage::user(content)],
        n: config.recall_samples,
        temperature: config.temperature,
        model_name: config.model_name.clone(),
        max_output_tokens: config.max_output_tokens,
    }
}

pub fn table_recall_text(schema: &dyn SchemaView, question: &Question) -> String {
    format!(
        "{TABLE_RECALL_INSTRUCTION}\n\nSchema:\n{}\n\nQuestion:\n### {}",
        ClearLayout::new(LineEnd::Bare, FkPlacement::Omit).render(schema),
        question.text
    )
}

pub fn column_recall_text(linked: &dyn SchemaView, question: &Question) -> String {
    format!(
        "{COLUMN_RECALL_INSTRUCTION}\n\nSchema:\n{}\n\nQuestion:\n### {}",
        RECALL_LAYOUT.render(linked),
        question.text
    )
}

pub fn build_table_recall_prompt(schema: &DatabaseSchema, question: &Question, config: &LinkingConfig) -> ChatExchange {
    recall_exchange(table_recall_text(schema, question), config)
}

pub fn build_column_recall_prompt(
    linked_tables: &LinkedSchema,
    question: &Question,
    config: &LinkingConfig,
) -> ChatExchange {
    recall_exchange(column_recall_text(linked_tables, question), config)
}

/// Returns the first balanced `open ... close` span, skipping brackets
/// inside quoted strings.
fn first_balanced(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            c if c == open => depth += 1,
            c if c == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + c.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn loose_items(inner: &str) -> Vec<String> {
    inner
        .split(',')
        .map(|s| {
            s.trim()
                .trim_matches(|c| c == '"' || c == '\'' || c == '`')
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parses the first bracketed list and keeps entries naming schema tables,
/// in order, first occurrence only, with the schema's spelling.
pub fn parse_table_list(text: &str, schema: &DatabaseSchema) -> Vec<String> {
    let Some(list) = first_balanced(text, '[', ']') else {
        return Vec::new();
    };
    let items = serde_json::from_str::<Vec<serde_json::Value>>(list)
        .map(|values| {
            values
                .into_iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_else(|_| loose_items(&list[1..list.len() - 1]));
    let mut out: Vec<String> = Vec::new();
    for item in items {
        if let Some(table) = schema.table(item.trim()) {
            if !out.contains(&table.name) {
                out.push(table.name.clone());
            }
        }
    }
    out
}

/// Parses the first JSON object into linked table -> recalled columns.
/// Every linked table is present in the result, in linked order.
pub fn parse_column_dict(text: &str, linked_tables: &LinkedSchema) -> Vec<(String, Vec<String>)> {
    let mut out: Vec<(String, Vec<String>)> = linked_tables
        .tables
        .iter()
        .map(|t| (t.name.clone(), Vec::new()))
        .collect();
    let cleaned = strip_fences(text);
    let Some(object) = first_balanced(&cleaned, '{', '}') else {
        return out;
    };
    let Ok(map) = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(object) else {
        return out;
    };
    for (key, value) in map {
        let Some(idx) = linked_tables
            .tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(key.trim()))
        else {
            continue;
        };
        let table = &linked_tables.tables[idx];
        let Some(values) = value.as_array() else { continue };
        for v in values.iter().filter_map(|v| v.as_str()) {
            let v = v.trim();
            // Accept `table.column` spellings of the same table.
            let name = match v.split_once('.') {
                Some((t, c)) if t.eq_ignore_ascii_case(&table.name) => c,
                _ => v,
            };
            if let Some(col) = table.columns.iter().find(|c| c.eq_ignore_ascii_case(name)) {
                if !out[idx].1.contains(col) {
                    out[idx].1.push(col.clone());
                }
            }
        }
    }
    out
}

/// Most frequent top-`k_tables` set across samples, compared as unordered
/// sets. Ties go to the set seen first; the winner keeps the order of its
/// first occurrence. Empty samples do not vote.
pub fn vote_table_sets(samples: &[Vec<String>], k_tables: usize) -> Result<Vec<String>, LinkError> {
    let mut counts: HashMap<Vec<String>, (usize, usize)> = HashMap::new();
    for (i, sample) in samples.iter().enumerate() {
        let top = &sample[..sample.len().min(k_tables)];
        if top.is_empty() {
            continue;
        }
        let mut key: Vec<String> = top.iter().map(|t| t.to_lowercase()).collect();
        key.sort();
        counts.entry(key).or_insert((0, i)).0 += 1;
    }
    let (_, &(_, first)) = counts
        .iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .ok_or(LinkError::NoTables)?;
    let winner = &samples[first];
    Ok(winner[..winner.len().min(k_tables)].to_vec())
}

/// Per table, the `k_columns` most frequently recalled columns. Ties break
/// on lower mean rank, then schema order. Tables with nothing recalled fall
/// back to their first `k_columns` columns.
pub fn vote_columns(
    samples: &[Vec<(String, Vec<String>)>],
    tables: &LinkedSchema,
    k_columns: usize,
) -> Vec<(String, Vec<String>)> {
    tables
        .tables
        .iter()
        .map(|table| {
            // (count, rank sum) per schema column
            let mut stats = vec![(0usize, 0usize); table.columns.len()];
            for sample in samples {
                let Some((_, recalled)) = sample.iter().find(|(t, _)| t.eq_ignore_ascii_case(&table.name)) else {
                    continue;
                };
                for (rank, col) in recalled.iter().enumerate() {
                    if let Some(pos) = table.columns.iter().position(|c| c.eq_ignore_ascii_case(col)) {
                        stats[pos].0 += 1;
                        stats[pos].1 += rank + 1;
                    }
                }
            }
            let mut recalled: Vec<usize> = (0..table.columns.len()).filter(|&i| stats[i].0 > 0).collect();
            if recalled.is_empty() {
                let fallback = table.columns.iter().take(k_columns).cloned().collect();
                return (table.name.clone(), fallback);
            }
            // Compare mean ranks r_a/c_a < r_b/c_b as r_a*c_b < r_b*c_a.
            recalled.sort_by(|&a, &b| {
                let (ca, ra) = stats[a];
                let (cb, rb) = stats[b];
                cb.cmp(&ca).then((ra * cb).cmp(&(rb * ca))).then(a.cmp(&b))
            });
            let columns = recalled
                .into_iter()
                .take(k_columns)
                .map(|i| table.columns[i].clone())
                .collect();
            (table.name.clone(), columns)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Score")]
pub struct LinkOutcome<S> {
    pub linked: LinkedSchema,
    pub scores: RecallScores<S>,
    /// Table recall produced nothing usable and the schema prefix was used.
    pub table_fallback: bool,
}

/// Full linking pass: table recall and vote, column recall and vote, FK
/// filtering, and per-item recall scores.
pub fn link_schema<S: Score>(
    schema: &DatabaseSchema,
    question: &Question,
    backend: &dyn ChatBackend,
    config: &LinkingConfig,
) -> Result<LinkOutcome<S>, GatewayError> {
    let mut scores = RecallScores::<S>::zeros(schema);
    let mut table_fallback = false;
    let all_tables: Vec<String> = schema.tables.iter().map(|t| t.name.clone()).collect();

    let chosen = if schema.tables.len() <= config.k_tables {
        for score in scores.table_scores.values_mut() {
            *score = S::one();
        }
        all_tables
    } else {
        let exchange = build_table_recall_prompt(schema, question, config);
        let completion = complete_checked(backend, &exchange)?;
        let samples: Vec<Vec<String>> = completion.texts.iter().map(|t| parse_table_list(t, schema)).collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sample in &samples {
            for table in sample.iter().take(config.k_tables) {
                *counts.entry(table.as_str()).or_default() += 1;
            }
        }
        for (table, score) in scores.table_scores.iter_mut() {
            *score = S::ratio(counts.get(table.as_str()).copied().unwrap_or(0), samples.len());
        }
        match vote_table_sets(&samples, config.k_tables) {
            Ok(tables) => tables,
            Err(e) => {
                warn!(question = %question.question_id, error = %e, "table recall failed; using schema prefix");
                table_fallback = true;
                all_tables.into_iter().take(config.k_tables).collect()
            }
        }
    };

    let candidate = LinkedSchema::with_all_columns(schema, &chosen);
    let exchange = build_column_recall_prompt(&candidate, question, config);
    let completion = complete_checked(backend, &exchange)?;
    let samples: Vec<Vec<(String, Vec<String>)>> = completion
        .texts
        .iter()
        .map(|t| parse_column_dict(t, &candidate))
        .collect();
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    for (table, columns) in samples.iter().flatten() {
        for col in columns {
            *counts.entry((table.as_str(), col.as_str())).or_default() += 1;
        }
    }
    for (table, columns) in scores.column_scores.iter_mut() {
        for (col, score) in columns.iter_mut() {
            let count = counts.get(&(table.as_str(), col.as_str())).copied().unwrap_or(0);
            *score = S::ratio(count, samples.len());
        }
    }
    let voted = vote_columns(&samples, &candidate, config.k_columns);
    let tables: Vec<LinkedTable> = voted
        .into_iter()
        .map(|(name, columns)| LinkedTable { name, columns })
        .collect();
    let foreign_keys = fks_within(schema, &tables);
    Ok(LinkOutcome {
        linked: LinkedSchema {
            db_id: schema.db_id.clone(),
            tables,
            foreign_keys,
        },
        scores,
        table_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Column, Table};

    fn schema(tables: &[(&str, &[&str])]) -> DatabaseSchema {
        DatabaseSchema::new(
            "db",
            tables
                .iter()
                .map(|(n, cols)| Table {
                    name: n.to_string(),
                    columns: cols
                        .iter()
                        .map(|c| Column {
                            name: c.to_string(),
                            declared_type: String::new(),
                        })
                        .collect(),
                })
                .collect(),
            vec![],
        )
        .unwrap()
    }

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn table_list_parsing() {
        let s = schema(&[("singer", &["a"]), ("cars_data", &["b"])]);
        assert_eq!(
            parse_table_list("Sure!\nThe ranking is [\"CARS_DATA\", 'singer']. Done [x]", &s),
            strings(&["cars_data", "singer"])
        );
        assert_eq!(
            parse_table_list(r#"["ghost_table", "singer", "Singer"]"#, &s),
            strings(&["singer"])
        );
        assert!(parse_table_list("no list here", &s).is_empty());
    }

    #[test]
    fn column_dict_parsing() {
        let s = schema(&[("car_makers", &["id", "maker"]), ("cars_data", &["id", "year"])]);
        let linked = LinkedSchema::with_all_columns(&s, &strings(&["car_makers", "cars_data"]));
        let text = "```json\n{\"car_makers\": [\"maker\", \"year\"], \"CARS_DATA\": [\"cars_data.year\"], \"x\": [\"id\"]}\n```";
        assert_eq!(
            parse_column_dict(text, &linked),
            vec![
                ("car_makers".to_string(), strings(&["maker"])),
                ("cars_data".to_string(), strings(&["year"]))
            ]
        );
        let empty = parse_column_dict("garbage {", &linked);
        assert!(empty.iter().all(|(_, c)| c.is_empty()));
    }

    #[test]
    fn table_vote_majority_and_order() {
        let mut samples = vec![strings(&["b", "a", "c", "e", "x"]); 4];
        samples.extend(vec![strings(&["a", "b", "c", "d"]); 6]);
        samples.push(strings(&["d", "c", "b", "a"]));
        assert_eq!(vote_table_sets(&samples, 4).unwrap(), strings(&["a", "b", "c", "d"]));
        assert_eq!(vote_table_sets(&[vec![], vec![]], 4), Err(LinkError::NoTables));
    }

    #[test]
    fn column_vote_fallback_and_short_tables() {
        let s = schema(&[("t", &["a", "b", "c"]), ("u", &["p", "q", "r", "s", "v", "w"])]);
        let linked = LinkedSchema::with_all_columns(&s, &strings(&["t", "u"]));
        let samples = vec![vec![
            ("t".to_string(), strings(&["c", "a", "b"])),
            ("u".to_string(), vec![]),
        ]];
        let voted = vote_columns(&samples, &linked, 5);
        assert_eq!(voted[0].1, strings(&["c", "a", "b"]));
        assert_eq!(voted[1].1, strings(&["p", "q", "r", "s", "v"]));
    }
}
