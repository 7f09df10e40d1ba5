//! Shared helpers for integration tests: paths into the bundled mini-corpus
//! and a deterministic stand-in for the completion endpoint.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use c3sql_core::catalog::{load_spider_tables, Column, DatabaseSchema, FkRelation, Question, Table};
use c3sql_core::eval::extract_gold_schema_items;
use c3sql_core::gateway::{ChatBackend, ChatCompletion, ChatExchange, FnBackend, GatewayError};
use c3sql_core::linking::{LinkedSchema, LinkedTable, COLUMN_RECALL_INSTRUCTION, TABLE_RECALL_INSTRUCTION};
use c3sql_core::pipeline::Dataset;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn corpus_dir() -> PathBuf {
    fixtures_dir().join("mini_corpus")
}

pub fn prompt_fixture(name: &str) -> String {
    let path = fixtures_dir().join("prompts").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn load_corpus() -> Dataset {
    let dir = corpus_dir();
    Dataset::load(&dir.join("tables.json"), &dir.join("dev.json"), None).expect("mini-corpus loads")
}

pub fn corpus_schemas() -> Vec<DatabaseSchema> {
    load_spider_tables(corpus_dir().join("tables.json")).expect("mini-corpus tables load")
}

/// Scripted generation samples per question id; sample `i` of a request is
/// entry `i % len`.
pub fn load_generation_script() -> BTreeMap<String, Vec<String>> {
    let path = corpus_dir().join("llm_script.json");
    let text = std::fs::read_to_string(&path).expect("llm_script.json readable");
    serde_json::from_str(&text).expect("llm_script.json parses")
}

/// Deterministic answers for every prompt the pipeline sends.
///
/// Recall prompts are answered from the gold query: gold tables (or
/// columns) first, then one non-gold item that rotates with the sample
/// index, so recall scores separate gold from non-gold items without being
/// all-or-nothing. Generation prompts cycle through the scripted samples.
pub struct ScriptedLlm {
    dataset: Dataset,
    script: BTreeMap<String, Vec<String>>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        Self {
            dataset: load_corpus(),
            script: load_generation_script(),
        }
    }

    fn question_for(&self, prompt: &str) -> Result<&Question, GatewayError> {
        let mut hits = self.dataset.questions.iter().filter(|q| prompt.contains(&q.text));
        match (hits.next(), hits.next()) {
            (Some(q), None) => Ok(q),
            _ => Err(GatewayError::Malformed(
                "scripted backend cannot identify the question".into(),
            )),
        }
    }

    pub fn respond(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        let prompt = exchange.last_user_content();
        let q = self.question_for(prompt)?;
        let schema = self.dataset.schema_for(q);
        let gold = extract_gold_schema_items(q.gold_sql.as_deref().unwrap_or(""), schema);
        let n = exchange.n as usize;
        let texts = if prompt.starts_with(TABLE_RECALL_INSTRUCTION) {
            let others: Vec<&str> = schema
                .tables
                .iter()
                .map(|t| t.name.as_str())
                .filter(|t| !gold.tables.contains(*t))
                .collect();
            (0..n)
                .map(|i| {
                    let mut list: Vec<&str> = schema
                        .tables
                        .iter()
                        .map(|t| t.name.as_str())
                        .filter(|t| gold.tables.contains(*t))
                        .collect();
                    if !others.is_empty() {
                        list.push(others[i % others.len()]);
                    }
                    serde_json::to_string(&list).unwrap()
                })
                .collect()
        } else if prompt.starts_with(COLUMN_RECALL_INSTRUCTION) {
            (0..n)
                .map(|i| {
                    let mut answer = serde_json::Map::new();
                    for table in &schema.tables {
                        let (hit, miss): (Vec<&str>, Vec<&str>) = table
                            .column_names()
                            .partition(|c| gold.columns.contains(&(table.name.clone(), c.to_string())));
                        let mut cols = hit;
                        if !miss.is_empty() {
                            cols.push(miss[i % miss.len()]);
                        }
                        answer.insert(table.name.clone(), cols.into());
                    }
                    format!("```json\n{}\n```", serde_json::Value::Object(answer))
                })
                .collect()
        } else {
            let samples = self
                .script
                .get(&q.question_id)
                .ok_or_else(|| GatewayError::Malformed(format!("no script for {}", q.question_id)))?;
            (0..n).map(|i| samples[i % samples.len()].clone()).collect()
        };
        Ok(ChatCompletion { texts, usage: None })
    }

    pub fn into_backend(self) -> impl ChatBackend {
        FnBackend(move |exchange: &ChatExchange| self.respond(exchange))
    }
}

// --- schemas used by the golden prompt fixtures ---

fn table(name: &str, columns: &[&str]) -> Table {
    Table {
        name: name.to_string(),
        columns: columns
            .iter()
            .map(|c| Column {
                name: c.to_string(),
                declared_type: String::new(),
            })
            .collect(),
    }
}

/// concert_singer in its stored table and column order.
pub fn concert_singer() -> DatabaseSchema {
    DatabaseSchema::new(
        "concert_singer",
        vec![
            table(
                "stadium",
                &[
                    "stadium_id",
                    "location",
                    "name",
                    "capacity",
                    "highest",
                    "lowest",
                    "average",
                ],
            ),
            table(
                "singer",
                &[
                    "singer_id",
                    "name",
                    "country",
                    "song_name",
                    "song_release_year",
                    "age",
                    "is_male",
                ],
            ),
            table(
                "concert",
                &["concert_id", "concert_name", "theme", "stadium_id", "year"],
            ),
            table("singer_in_concert", &["concert_id", "singer_id"]),
        ],
        vec![
            FkRelation::new("concert", "stadium_id", "stadium", "stadium_id"),
            FkRelation::new("singer_in_concert", "singer_id", "singer", "singer_id"),
            FkRelation::new("singer_in_concert", "concert_id", "concert", "concert_id"),
        ],
    )
    .unwrap()
}

/// concert_singer with tables and columns in the order of the
/// single-line layout example.
pub fn concert_singer_reordered() -> DatabaseSchema {
    DatabaseSchema::new(
        "concert_singer",
        vec![
            table(
                "singer",
                &[
                    "singer_id",
                    "name",
                    "country",
                    "age",
                    "song_name",
                    "song_release_year",
                    "is_male",
                ],
            ),
            table(
                "stadium",
                &[
                    "location",
                    "name",
                    "capacity",
                    "highest",
                    "lowest",
                    "average",
                    "stadium_id",
                ],
            ),
            table(
                "concert",
                &["theme", "year", "concert_id", "concert_name", "stadium_id"],
            ),
            table("singer_in_concert", &["concert_id", "singer_id"]),
        ],
        vec![],
    )
    .unwrap()
}

/// Linked subset of concert_singer shown in the calibrated conversation.
pub fn concert_singer_linked() -> LinkedSchema {
    let t = |name: &str, cols: &[&str]| LinkedTable {
        name: name.to_string(),
        columns: cols.iter().map(|c| c.to_string()).collect(),
    };
    LinkedSchema {
        db_id: "concert_singer".into(),
        tables: vec![
            t("singer", &["singer_id", "name", "country", "age"]),
            t("stadium", &["capacity", "highest", "lowest", "average"]),
            t("concert", &["theme", "year", "concert_id", "concert_name"]),
            t("singer_in_concert", &["concert_id", "singer_id"]),
        ],
        foreign_keys: vec![
            FkRelation::new("concert", "stadium_id", "stadium", "stadium_id"),
            FkRelation::new("singer_in_concert", "singer_id", "singer", "singer_id"),
            FkRelation::new("singer_in_concert", "concert_id", "concert", "concert_id"),
        ],
    }
}

pub fn car_1() -> DatabaseSchema {
    DatabaseSchema::new(
        "car_1",
        vec![
            table("continents", &["contid", "continent"]),
            table("countries", &["countryid", "countryname", "continent"]),
            table("car_makers", &["id", "maker", "fullname", "country"]),
            table("model_list", &["modelid", "maker", "model"]),
            table("car_names", &["makeid", "model", "make"]),
            table(
                "cars_data",
                &[
                    "id",
                    "mpg",
                    "cylinders",
                    "edispl",
                    "horsepower",
                    "weight",
                    "accelerate",
                    "year",
                ],
            ),
        ],
        vec![
            FkRelation::new("countries", "continent", "continents", "contid"),
            FkRelation::new("car_makers", "country", "countries", "countryid"),
            FkRelation::new("model_list", "maker", "car_makers", "id"),
            FkRelation::new("car_names", "model", "model_list", "model"),
            FkRelation::new("cars_data", "id", "car_names", "makeid"),
        ],
    )
    .unwrap()
}

pub const CAR_1_QUESTION: &str = "What is the name of the different car makers who produced a car in 1970?";
pub const CONCERT_SINGER_QUESTION: &str = "How many singers do we have?";
