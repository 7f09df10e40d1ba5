//! Execution accuracy, recall AUC and report rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::catalog::{DatabaseSchema, Difficulty};
use crate::executor::{is_order_sensitive, results_equivalent, ExecError, SqlRunner};
use crate::linking::RecallScores;
use crate::metrics::{pooled_auc, AucPooling, LabeledScores};
use crate::scalar::Score;
use crate::sqltext::{tokenize, Token, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOutcome {
    Match,
    Mismatch,
    PredError,
    GoldError,
}

/// One question to score.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub question_id: String,
    /// `None` when no prediction exists for the question.
    pub predicted_sql: Option<String>,
    pub gold_sql: String,
    pub db_path: PathBuf,
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub predicted_sql: Option<String>,
    pub gold_sql: String,
    pub outcome: EvalOutcome,
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub total: usize,
    #[serde(rename = "match")]
    pub matched: usize,
    pub mismatch: usize,
    pub pred_error: usize,
    pub gold_error: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, outcome: EvalOutcome) {
        self.total += 1;
        match outcome {
            EvalOutcome::Match => self.matched += 1,
            EvalOutcome::Mismatch => self.mismatch += 1,
            EvalOutcome::PredError => self.pred_error += 1,
            EvalOutcome::GoldError => self.gold_error += 1,
        }
    }

    /// Matches over all questions; `None` for an empty set.
    pub fn ex(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_ex: Option<f64>,
    pub per_difficulty: BTreeMap<Difficulty, OutcomeCounts>,
    pub counts: OutcomeCounts,
    pub table_auc: Option<f64>,
    pub column_auc: Option<f64>,
    pub notes: Vec<String>,
}

/// Scores one record: gold first, then the prediction, compared with the
/// gold query's order sensitivity.
pub fn score_record(input: &EvalInput, runner: &SqlRunner) -> Result<EvalRecord, ExecError> {
    let conn = runner.open(&input.db_path)?;
    let gold = runner.execute_on(&conn, &input.gold_sql);
    let outcome = match gold.success() {
        None => EvalOutcome::GoldError,
        Some(gold_result) => match &input.predicted_sql {
            None => EvalOutcome::Mismatch,
            Some(pred) => match runner.execute_on(&conn, pred).success() {
                None => EvalOutcome::PredError,
                Some(pred_result) => {
                    let ordered = is_order_sensitive(&input.gold_sql);
                    let mut g = gold_result.clone();
                    let mut p = pred_result.clone();
                    g.order_sensitive = ordered;
                    p.order_sensitive = ordered;
                    if results_equivalent(&g, &p) {
                        EvalOutcome::Match
                    } else {
                        EvalOutcome::Mismatch
                    }
                }
            },
        },
    };
    Ok(EvalRecord {
        question_id: input.question_id.clone(),
        predicted_sql: input.predicted_sql.clone(),
        gold_sql: input.gold_sql.clone(),
        outcome,
        difficulty: input.difficulty,
    })
}

/// Aggregates scored records into the EX part of a report.
pub fn summarize(records: &[EvalRecord]) -> EvalReport {
    let mut report = EvalReport::default();
    for record in records {
        report.counts.add(record.outcome);
        if let Some(d) = record.difficulty {
            report.per_difficulty.entry(d).or_default().add(record.outcome);
        }
    }
    report.overall_ex = report.counts.ex();
    if report.counts.gold_error > 0 {
        report.notes.push(format!(
            "{} gold queries failed to execute; they count as misses",
            report.counts.gold_error
        ));
    }
    report
}

/// Executes every (predicted, gold) pair and reports execution accuracy.
pub fn execution_accuracy(
    inputs: &[EvalInput],
    runner: &SqlRunner,
) -> Result<(Vec<EvalRecord>, EvalReport), ExecError> {
    let records = inputs
        .iter()
        .map(|input| score_record(input, runner))
        .collect::<Result<Vec<_>, _>>()?;
    let report = summarize(&records);
    Ok((records, report))
}

/// Tables and `(table, column)` pairs referenced by a query.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GoldItems {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<(String, String)>,
}

const NOT_AN_ALIAS: &[&str] = &[
    "where",
    "join",
    "inner",
    "left",
    "right",
    "outer",
    "cross",
    "natural",
    "on",
    "group",
    "order",
    "limit",
    "having",
    "union",
    "intersect",
    "except",
    "using",
    "natural",
    "select",
    "from",
    "and",
    "or",
    "not",
    "as",
    "offset",
];

/// Best-effort extraction of the schema items a gold query touches. Table
/// names mark tables; `t.c` and `alias.c` resolve exactly; bare column names
/// mark that column in every referenced table that has it. Names are
/// returned with schema spelling. Columns of tables only reached through
/// `SELECT *` are not reported.
pub fn extract_gold_schema_items(gold_sql: &str, schema: &DatabaseSchema) -> GoldItems {
    let tokens: Vec<Token> = tokenize(gold_sql)
        .into_iter()
        .filter(|t| t.kind != TokenKind::StringLit)
        .collect();
    let ident = |i: usize| tokens.get(i).and_then(Token::identifier);
    let is_dot = |i: usize| {
        tokens
            .get(i)
            .is_some_and(|t| t.kind == TokenKind::Symbol && t.text == ".")
    };

    let mut items = GoldItems::default();
    let mut aliases: HashMap<String, String> = HashMap::new();
    // Indices of identifiers consumed by dotted references or alias names.
    let mut consumed = vec![false; tokens.len()];

    for i in 0..tokens.len() {
        let Some(name) = ident(i) else { continue };
        let Some(table) = schema.table(name) else { continue };
        if is_dot(i + 1) || (i > 0 && is_dot(i - 1)) {
            continue;
        }
        items.tables.insert(table.name.clone());
        let alias_at = if tokens.get(i + 1).is_some_and(|t| t.is_keyword("as")) {
            Some(i + 2)
        } else {
            Some(i + 1)
        };
        if let Some(j) = alias_at {
            if let Some(alias) = ident(j) {
                let reserved =
                    tokens[j].kind == TokenKind::Word && NOT_AN_ALIAS.iter().any(|kw| alias.eq_ignore_ascii_case(kw));
                if !reserved && !is_dot(j + 1) && schema.table(alias).is_none() {
                    aliases.insert(alias.to_lowercase(), table.name.clone());
                    consumed[j] = true;
                }
            }
        }
    }

    for i in 0..tokens.len() {
        let (Some(left), true, Some(right)) = (ident(i), is_dot(i + 1), ident(i + 2)) else {
            continue;
        };
        consumed[i] = true;
        consumed[i + 2] = true;
        let table = aliases
            .get(&left.to_lowercase())
            .and_then(|t| schema.table(t))
            .or_else(|| schema.table(left));
        if let Some(table) = table {
            items.tables.insert(table.name.clone());
            if let Some(col) = table.column(right) {
                items.columns.insert((table.name.clone(), col.name.clone()));
            }
        }
    }

    for (i, &used) in consumed.iter().enumerate() {
        if used || is_dot(i + 1) {
            continue;
        }
        let Some(name) = ident(i) else { continue };
        for table_name in &items.tables.clone() {
            let table = schema.table(table_name).expect("marked tables come from the schema");
            if let Some(col) = table.column(name) {
                items.columns.insert((table.name.clone(), col.name.clone()));
            }
        }
    }
    items
}

/// Per-question labeled scores: gold items are positives, every other
/// schema item a negative.
pub fn label_scores<S: Score>(scores: &RecallScores<S>, gold: &GoldItems) -> (LabeledScores<S>, LabeledScores<S>) {
    let mut tables = LabeledScores::default();
    for (table, &score) in &scores.table_scores {
        tables.push(score, gold.tables.contains(table));
    }
    let mut columns = LabeledScores::default();
    for (table, cols) in &scores.column_scores {
        for (col, &score) in cols {
            columns.push(score, gold.columns.contains(&(table.clone(), col.clone())));
        }
    }
    (tables, columns)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecallAuc<S> {
    pub table_auc: Option<S>,
    pub column_auc: Option<S>,
}

/// Table and column recall AUC across questions.
pub fn recall_auc<S: Score>(per_question: &[(RecallScores<S>, GoldItems)], pooling: AucPooling) -> RecallAuc<S> {
    let (tables, columns): (Vec<_>, Vec<_>) = per_question
        .iter()
        .map(|(scores, gold)| label_scores(scores, gold))
        .unzip();
    RecallAuc {
        table_auc: pooled_auc(&tables, pooling),
        column_auc: pooled_auc(&columns, pooling),
    }
}

impl EvalReport {
    pub fn set_auc(&mut self, auc: RecallAuc<f64>) {
        self.table_auc = auc.table_auc;
        self.column_auc = auc.column_auc;
        for (name, value) in [("table", auc.table_auc), ("column", auc.column_auc)] {
            if value.is_none() {
                self.notes
                    .push(format!("{name} AUC undefined: no positive or no negative items"));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            // Value maps are BTreeMaps, so keys come out sorted.
            let value = serde_json::to_value(report).expect("report serializes");
            let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
            text.push('\n');
            text.into_bytes()
        }
        ReportFormat::Text => render_text(report).into_bytes(),
    }
}

fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let c = &report.counts;
    let _ = writeln!(out, "{:<14}{:>8}{:>8}{:>10}", "split", "count", "match", "EX");
    let _ = writeln!(out, "{}", "-".repeat(40));
    for d in Difficulty::ALL {
        let counts = report.per_difficulty.get(&d).copied().unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<14}{:>8}{:>8}{:>10}",
            d.as_str(),
            counts.total,
            counts.matched,
            fmt_ratio(counts.ex())
        );
    }
    let _ = writeln!(
        out,
        "{:<14}{:>8}{:>8}{:>10}",
        "all",
        c.total,
        c.matched,
        fmt_ratio(report.overall_ex)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<14}{:>10}", "table AUC", fmt_ratio(report.table_auc));
    let _ = writeln!(out, "{:<14}{:>10}", "column AUC", fmt_ratio(report.column_auc));
    let _ = writeln!(out);
    for (label, n) in [
        ("match", c.matched),
        ("mismatch", c.mismatch),
        ("pred_error", c.pred_error),
        ("gold_error", c.gold_error),
    ] {
        let _ = writeln!(out, "{label:<14}{n:>10}");
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}
