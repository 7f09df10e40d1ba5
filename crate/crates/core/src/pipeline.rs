//! Batch stages over a dataset: link, generate, evaluate. Each stage writes
//! per-question artifacts under an output directory and skips questions
//! whose artifacts already exist unless forced.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::catalog::{self, CatalogError, DatabaseSchema, Question, SchemaView};
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::eval::{
    extract_gold_schema_items, recall_auc, render_report, score_record, summarize, EvalInput, EvalOutcome, EvalRecord,
    EvalReport, ReportFormat,
};
use crate::executor::{ExecError, SqlRunner};
use crate::gateway::{
    CacheStore, ChatBackend, ChatMessage, GatewayError, LiveBackend, RecordBackend, ReplayBackend, Role, Throttled,
};
use crate::linking::{build_column_recall_prompt, build_table_recall_prompt, link_schema, LinkedSchema, RecallScores};
use crate::prompt::build_generation_prompt;
use crate::vote::{generate_sql, GenerateError, VoteResult};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] CatalogError),
    #[error("fatal gateway error: {0}")]
    Gateway(GatewayError),
    #[error(transparent)]
    Environment(#[from] ExecError),
    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Gateway(e) if e.is_fatal() => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub struct Dataset {
    pub schemas: BTreeMap<String, DatabaseSchema>,
    pub questions: Vec<Question>,
}

impl Dataset {
    /// Loads schemas and questions; `db_dir` overrides the default
    /// `<tables dir>/database` location of the SQLite files.
    pub fn load(tables: &Path, questions: &Path, db_dir: Option<&Path>) -> Result<Self, PipelineError> {
        let mut schemas = catalog::load_spider_tables(tables)?;
        if let Some(dir) = db_dir {
            catalog::set_database_dir(&mut schemas, dir);
        }
        let questions = catalog::load_questions(questions)?;
        Self::new(schemas, questions)
    }

    pub fn new(schemas: Vec<DatabaseSchema>, questions: Vec<Question>) -> Result<Self, PipelineError> {
        let schemas: BTreeMap<String, DatabaseSchema> = schemas.into_iter().map(|s| (s.db_id.clone(), s)).collect();
        let mut ids = HashSet::new();
        for q in &questions {
            if !schemas.contains_key(&q.db_id) {
                return Err(PipelineError::Config(format!(
                    "question {} refers to unknown database `{}`",
                    q.question_id, q.db_id
                )));
            }
            if !ids.insert(q.question_id.as_str()) {
                return Err(PipelineError::Config(format!(
                    "duplicate question id {}",
                    q.question_id
                )));
            }
        }
        Ok(Self { schemas, questions })
    }

    pub fn schema_for(&self, question: &Question) -> &DatabaseSchema {
        &self.schemas[&question.db_id]
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == id)
    }
}

/// Backend selected by the configuration, throttled to
/// `max_inflight_requests` concurrent calls.
pub fn build_backend(config: &PipelineConfig) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    let store = CacheStore::new(&config.cache_dir);
    let live = || -> Result<LiveBackend, PipelineError> {
        let key = std::env::var(&config.api_key_env).unwrap_or_default();
        if key.trim().is_empty() {
            return Err(PipelineError::Config(format!(
                "the {} backend needs an API key in ${}",
                if config.backend == BackendKind::Live {
                    "live"
                } else {
                    "record"
                },
                config.api_key_env
            )));
        }
        LiveBackend::new(&config.base_url, key, config.request_timeout, config.retry_policy())
            .map_err(PipelineError::Gateway)
    };
    let limit = config.max_inflight_requests;
    Ok(match config.backend {
        BackendKind::Replay => Arc::new(Throttled::new(ReplayBackend::new(store), limit)),
        BackendKind::Record => Arc::new(Throttled::new(RecordBackend::new(live()?, store), limit)),
        BackendKind::Live => Arc::new(Throttled::new(live()?, limit)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkArtifact {
    pub question_id: String,
    pub db_id: String,
    pub linked: LinkedSchema,
    pub scores: RecallScores<f64>,
    pub table_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTrace {
    pub question_id: String,
    pub db_id: String,
    pub vote: VoteResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub question_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageSummary {
    pub processed: usize,
    pub skipped: usize,
    pub failures: Vec<Failure>,
}

impl StageSummary {
    pub fn merge(&mut self, other: StageSummary) {
        self.processed += other.processed;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }

    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

enum ItemResult<T> {
    Done(T),
    Skipped(T),
    Failed(String),
}

/// Runs `work` over `items` on at most `workers` threads. Results keep input
/// order. The first hard error stops new items from starting and is
/// returned (lowest index wins).
fn run_bounded<T, R, F>(items: &[T], workers: usize, work: F) -> Result<Vec<R>, PipelineError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, PipelineError> + Sync,
{
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<R, PipelineError>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let result = work(item);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    Ok(out)
}

/// Keeps question ids usable as file names.
fn file_stem(question_id: &str) -> String {
    question_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Artifact locations under one output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn link_dir(&self) -> PathBuf {
        self.root.join("link")
    }

    pub fn link_artifact(&self, question_id: &str) -> PathBuf {
        self.link_dir().join(format!("{}.json", file_stem(question_id)))
    }

    pub fn trace_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn trace(&self, question_id: &str) -> PathBuf {
        self.trace_dir().join(format!("{}.json", file_stem(question_id)))
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.json")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.json")
    }

    pub fn failures(&self) -> PathBuf {
        self.root.join("failures.json")
    }
}

pub struct Pipeline<'a> {
    pub dataset: &'a Dataset,
    pub config: &'a PipelineConfig,
    pub backend: &'a dyn ChatBackend,
    pub out: OutputLayout,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        dataset: &'a Dataset,
        config: &'a PipelineConfig,
        backend: &'a dyn ChatBackend,
        out: impl Into<PathBuf>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            dataset,
            config,
            backend,
            out: OutputLayout::new(out),
        })
    }

    fn runner(&self) -> SqlRunner {
        SqlRunner::new(self.config.exec_timeout)
    }

    fn gateway_failure(&self, stage: &str, e: GatewayError) -> Result<String, PipelineError> {
        if e.is_fatal() {
            Err(PipelineError::Gateway(e))
        } else {
            warn!(stage, error = %e, "question failed");
            Ok(e.to_string())
        }
    }

    fn summarize<T>(stage: &str, questions: &[Question], results: &[ItemResult<T>]) -> StageSummary {
        let mut summary = StageSummary::default();
        for (q, r) in questions.iter().zip(results) {
            match r {
                ItemResult::Done(_) => summary.processed += 1,
                ItemResult::Skipped(_) => summary.skipped += 1,
                ItemResult::Failed(message) => summary.failures.push(Failure {
                    stage: stage.to_string(),
                    question_id: q.question_id.clone(),
                    message: message.clone(),
                }),
            }
        }
        summary
    }

    /// Schema linking for every question.
    pub fn link(&self) -> Result<StageSummary, PipelineError> {
        let linking = self.config.linking_config();
        let results = run_bounded(&self.dataset.questions, self.config.max_inflight_requests, |q| {
            let path = self.out.link_artifact(&q.question_id);
            if path.exists() && !self.config.force {
                return Ok(ItemResult::Skipped(()));
            }
            let schema = self.dataset.schema_for(q);
            match link_schema::<f64>(schema, q, self.backend, &linking) {
                Ok(outcome) => {
                    write_json(
                        &path,
                        &LinkArtifact {
                            question_id: q.question_id.clone(),
                            db_id: q.db_id.clone(),
                            linked: outcome.linked,
                            scores: outcome.scores,
                            table_fallback: outcome.table_fallback,
                        },
                    )?;
                    Ok(ItemResult::Done(()))
                }
                Err(e) => Ok(ItemResult::Failed(self.gateway_failure("link", e)?)),
            }
        })?;
        let summary = Self::summarize("link", &self.dataset.questions, &results);
        info!(
            processed = summary.processed,
            skipped = summary.skipped,
            failed = summary.failures.len(),
            "link stage done"
        );
        Ok(summary)
    }

    pub fn load_link_artifact(&self, question_id: &str) -> Option<LinkArtifact> {
        let path = self.out.link_artifact(question_id);
        path.exists().then(|| read_json(&path).ok()).flatten()
    }

    /// SQL generation with execution voting; writes traces and the
    /// predictions file.
    pub fn generate(&self) -> Result<StageSummary, PipelineError> {
        let prompt = self.config.prompt_config();
        let sampling = self.config.generation_sampling();
        let runner = self.runner();
        let results = run_bounded(&self.dataset.questions, self.config.max_inflight_requests, |q| {
            let path = self.out.trace(&q.question_id);
            if path.exists() && !self.config.force {
                if let Ok(trace) = read_json::<VoteTrace>(&path) {
                    return Ok(ItemResult::Skipped(trace.vote.winner.text));
                }
            }
            let schema = self.dataset.schema_for(q);
            let artifact;
            let view: &dyn SchemaView = if self.config.use_linking {
                match self.load_link_artifact(&q.question_id) {
                    Some(a) => {
                        artifact = a;
                        &artifact.linked
                    }
                    None => return Ok(ItemResult::Failed("missing linking artifact".into())),
                }
            } else {
                schema
            };
            match generate_sql(q, view, self.backend, &prompt, &sampling, &schema.sqlite_path, &runner) {
                Ok(vote) => {
                    let sql = vote.winner.text.clone();
                    write_json(
                        &path,
                        &VoteTrace {
                            question_id: q.question_id.clone(),
                            db_id: q.db_id.clone(),
                            vote,
                        },
                    )?;
                    Ok(ItemResult::Done(sql))
                }
                Err(GenerateError::Gateway(e)) => Ok(ItemResult::Failed(self.gateway_failure("generate", e)?)),
                Err(GenerateError::Exec(e)) => Err(e.into()),
            }
        })?;
        let predictions: Vec<Prediction> = self
            .dataset
            .questions
            .iter()
            .zip(&results)
            .filter_map(|(q, r)| match r {
                ItemResult::Done(sql) | ItemResult::Skipped(sql) => Some(Prediction {
                    question_id: q.question_id.clone(),
                    sql: sql.clone(),
                }),
                ItemResult::Failed(_) => None,
            })
            .collect();
        write_json(&self.out.predictions(), &predictions)?;
        let summary = Self::summarize("generate", &self.dataset.questions, &results);
        info!(
            processed = summary.processed,
            skipped = summary.skipped,
            failed = summary.failures.len(),
            "generate stage done"
        );
        Ok(summary)
    }

    /// Scores `predictions` against the gold queries and writes the report
    /// in both formats. Recall AUC is included when linking artifacts exist.
    pub fn evaluate(&self, predictions: &Path) -> Result<EvalReport, PipelineError> {
        let predictions: Vec<Prediction> = read_json(predictions)?;
        let (records, mut report) = self.score(&predictions)?;
        self.attach_auc(&mut report);
        write_json(&self.out.records(), &records)?;
        write_atomic(&self.out.report_json(), &render_report(&report, ReportFormat::Json))?;
        write_atomic(&self.out.report_text(), &render_report(&report, ReportFormat::Text))?;
        Ok(report)
    }

    fn score(&self, predictions: &[Prediction]) -> Result<(Vec<EvalRecord>, EvalReport), PipelineError> {
        let by_id: HashMap<&str, &str> = predictions
            .iter()
            .map(|p| (p.question_id.as_str(), p.sql.as_str()))
            .collect();
        let mut notes = Vec::new();
        let known: HashSet<&str> = self.dataset.questions.iter().map(|q| q.question_id.as_str()).collect();
        let unknown: Vec<&str> = predictions
            .iter()
            .map(|p| p.question_id.as_str())
            .filter(|id| !known.contains(id))
            .collect();
        if !unknown.is_empty() {
            notes.push(format!("predictions for unknown question ids: {}", unknown.join(", ")));
        }
        let mut missing = Vec::new();
        let mut no_gold = Vec::new();
        let mut inputs = Vec::new();
        for q in &self.dataset.questions {
            let Some(gold) = &q.gold_sql else {
                no_gold.push(q.question_id.as_str());
                continue;
            };
            let predicted = by_id.get(q.question_id.as_str()).map(|s| s.to_string());
            if predicted.is_none() {
                missing.push(q.question_id.as_str());
            }
            inputs.push(EvalInput {
                question_id: q.question_id.clone(),
                predicted_sql: predicted,
                gold_sql: gold.clone(),
                db_path: self.dataset.schema_for(q).sqlite_path.clone(),
                difficulty: q.difficulty,
            });
        }
        if !missing.is_empty() {
            notes.push(format!("no prediction (scored as mismatch): {}", missing.join(", ")));
        }
        if !no_gold.is_empty() {
            notes.push(format!("no gold query, not scored: {}", no_gold.join(", ")));
        }
        let runner = self.runner();
        let records = run_bounded(&inputs, self.config.max_inflight_requests, |input| {
            score_record(input, &runner).map_err(PipelineError::from)
        })?;
        let mut report = summarize(&records);
        report.notes.extend(notes);
        Ok((records, report))
    }

    fn attach_auc(&self, report: &mut EvalReport) {
        let mut per_question = Vec::new();
        for q in &self.dataset.questions {
            let (Some(gold), Some(artifact)) = (&q.gold_sql, self.load_link_artifact(&q.question_id)) else {
                continue;
            };
            let items = extract_gold_schema_items(gold, self.dataset.schema_for(q));
            per_question.push((artifact.scores, items));
        }
        if per_question.is_empty() {
            report
                .notes
                .push("recall AUC not computed: no linking artifacts".into());
            return;
        }
        report.set_auc(recall_auc(&per_question, self.config.auc_pooling));
    }

    /// Link (when enabled), generate and evaluate.
    pub fn run(&self) -> Result<(StageSummary, EvalReport), PipelineError> {
        let mut summary = StageSummary::default();
        if self.config.use_linking {
            summary.merge(self.link()?);
        }
        summary.merge(self.generate()?);
        let report = self.evaluate(&self.out.predictions())?;
        write_json(&self.out.failures(), &summary.failures)?;
        Ok((summary, report))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    TableRecall,
    ColumnRecall,
    Generation,
}

impl std::str::FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table-recall" => Ok(Self::TableRecall),
            "column-recall" => Ok(Self::ColumnRecall),
            "generation" => Ok(Self::Generation),
            other => Err(format!(
                "unknown prompt kind `{other}` (expected table-recall, column-recall or generation)"
            )),
        }
    }
}

/// `Role: USER` / `Content:` blocks separated by blank lines.
pub fn render_conversation(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "SYSTEM",
                Role::User => "USER",
                Role::Assistant => "ASSISTANT",
            };
            format!("Role: {role}\nContent:\n{}", m.content)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl Pipeline<'_> {
    /// The assembled prompt for one question, for inspection. Column recall
    /// and linked generation read the question's linking artifact.
    pub fn dump_prompt(&self, question_id: &str, kind: PromptKind) -> Result<String, PipelineError> {
        let q = self
            .dataset
            .question(question_id)
            .ok_or_else(|| PipelineError::Config(format!("unknown question id {question_id}")))?;
        let schema = self.dataset.schema_for(q);
        let artifact = || {
            self.load_link_artifact(question_id).ok_or_else(|| {
                PipelineError::Config(format!("no linking artifact for {question_id}; run `link` first"))
            })
        };
        let exchange = match kind {
            PromptKind::TableRecall => build_table_recall_prompt(schema, q, &self.config.linking_config()),
            PromptKind::ColumnRecall => {
                let names: Vec<String> = artifact()?.linked.tables.into_iter().map(|t| t.name).collect();
                let candidate = LinkedSchema::with_all_columns(schema, &names);
                build_column_recall_prompt(&candidate, q, &self.config.linking_config())
            }
            PromptKind::Generation => {
                let prompt = self.config.prompt_config();
                let sampling = self.config.generation_sampling();
                if self.config.use_linking {
                    build_generation_prompt(&artifact()?.linked, q, &prompt, &sampling)
                } else {
                    build_generation_prompt(schema, q, &prompt, &sampling)
                }
            }
        };
        Ok(render_conversation(&exchange.messages))
    }
}

/// Outcome counts keyed by outcome, for callers that print summaries.
pub fn outcome_histogram(records: &[EvalRecord]) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for r in records {
        let key = match r.outcome {
            EvalOutcome::Match => "match",
            EvalOutcome::Mismatch => "mismatch",
            EvalOutcome::PredError => "pred_error",
            EvalOutcome::GoldError => "gold_error",
        };
        *map.entry(key.to_string()).or_insert(0) += 1;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_runner_keeps_order_and_stops_on_error() {
        let items: Vec<usize> = (0..50).collect();
        let out = run_bounded(&items, 4, |&i| Ok(i * 2)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        let err = run_bounded(&items, 4, |&i| {
            if i == 7 {
                Err(PipelineError::Config("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(err, Err(PipelineError::Config(_))));
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("dev/12 a"), "dev_12_a");
    }

    #[test]
    fn live_without_key_is_config_error() {
        let config = PipelineConfig {
            backend: BackendKind::Live,
            api_key_env: "C3SQL_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..PipelineConfig::default()
        };
        let err = build_backend(&config).err().unwrap();
        assert_eq!(err.exit_code(), 2);
    }
}
