//! Turns sampled completions into SQL candidates, groups them by execution
//! result and picks a query from the largest group.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Question, SchemaView};
use crate::executor::{results_equivalent, ExecError, ExecutionOutcome, ResultTable, SqlRunner};
use crate::gateway::{complete_checked, ChatBackend, GatewayError};
use crate::prompt::{build_generation_prompt, GenerationSampling, PromptConfig};
use crate::sqltext::{tokenize, TokenKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub text: String,
    pub sample_index: usize,
    pub raw_completion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    SqlError,
    Timeout,
    RowLimit,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discard {
    pub sample_index: usize,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Sample indices, ascending. The first one is the representative.
    pub members: Vec<usize>,
    /// Result of the representative; absent when nothing was executed.
    #[serde(skip)]
    pub result: Option<ResultTable>,
    pub row_count: Option<usize>,
}

impl Cluster {
    pub fn representative(&self) -> usize {
        self.members[0]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub discarded: Vec<Discard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub winner: SqlCandidate,
    pub clusters: Vec<Cluster>,
    pub discarded: Vec<Discard>,
    /// Every candidate was discarded and the first sample was used.
    pub fallback: bool,
}

impl VoteResult {
    pub fn candidate_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum::<usize>() + self.discarded.len()
    }
}

fn starts_with_query_keyword(text: &str) -> bool {
    let head: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    head.eq_ignore_ascii_case("select") || head.eq_ignore_ascii_case("with")
}

/// Content of the first fenced block, or the whole text when unfenced.
fn unfence(raw: &str) -> String {
    let lines: Vec<&str> = raw.lines().collect();
    let Some(open) = lines.iter().position(|l| l.trim_start().starts_with("```")) else {
        return raw.to_string();
    };
    let body = &lines[open + 1..];
    let end = body
        .iter()
        .position(|l| l.trim_start().starts_with("```"))
        .unwrap_or(body.len());
    body[..end].join("\n")
}

/// Removes `--` comments that are outside string literals.
fn strip_line_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let bytes: Vec<(usize, char)> = line.char_indices().collect();
    for (k, &(i, c)) in bytes.iter().enumerate() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '\'' || c == '"' => quote = Some(c),
            None if c == '-' && bytes.get(k + 1).map(|p| p.1) == Some('-') => return &line[..i],
            None => {}
        }
    }
    line
}

/// Text before a line-initial SELECT/WITH is treated as prose unless it
/// already looks like the middle of a query.
fn looks_like_sql_fragment(text: &str) -> bool {
    let tokens = tokenize(text);
    let open = tokens
        .iter()
        .filter(|t| t.kind == TokenKind::Symbol && t.text == "(")
        .count();
    let close = tokens
        .iter()
        .filter(|t| t.kind == TokenKind::Symbol && t.text == ")")
        .count();
    open > close
        || tokens.iter().any(|t| {
            [
                "from",
                "where",
                "join",
                "group",
                "order",
                "union",
                "intersect",
                "except",
            ]
            .iter()
            .any(|kw| t.is_keyword(kw))
        })
}

/// Normalizes a completion into one line of SQL starting with SELECT or
/// WITH. Returns `None` when nothing is left. Idempotent.
pub fn normalize_completion(raw: &str) -> Option<String> {
    let body = unfence(raw);
    let mut lines: Vec<&str> = body.lines().collect();
    if let Some(start) = lines.iter().position(|l| starts_with_query_keyword(l)) {
        if start > 0 && !looks_like_sql_fragment(&lines[..start].join("\n")) {
            lines.drain(..start);
        }
    }
    let joined = lines
        .iter()
        .map(|l| strip_line_comment(l).trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let mut sql = joined.trim();
    loop {
        let trimmed = sql.trim_end_matches(';').trim_end();
        if trimmed.len() == sql.len() {
            break;
        }
        sql = trimmed;
    }
    if sql.is_empty() {
        return None;
    }
    Some(if starts_with_query_keyword(sql) {
        sql.to_string()
    } else {
        format!("SELECT {sql}")
    })
}

pub fn postprocess_completion(raw: &str, sample_index: usize) -> Option<SqlCandidate> {
    normalize_completion(raw).map(|text| SqlCandidate {
        text,
        sample_index,
        raw_completion: raw.to_string(),
    })
}

/// Executes each candidate and groups successes by result equivalence.
/// Groups are formed in sample-index order against each group's first
/// member, then sorted by size (descending) and smallest index.
pub fn cluster_by_execution(
    candidates: &[SqlCandidate],
    db_path: &Path,
    runner: &SqlRunner,
) -> Result<Clustering, ExecError> {
    let conn = runner.open(db_path)?;
    let mut ordered: Vec<&SqlCandidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.sample_index);
    let mut memo: HashMap<&str, ExecutionOutcome> = HashMap::new();
    let mut outcomes = Vec::with_capacity(ordered.len());
    for candidate in ordered {
        let outcome = memo
            .entry(candidate.text.as_str())
            .or_insert_with(|| runner.execute_on(&conn, &candidate.text))
            .clone();
        outcomes.push((candidate.sample_index, outcome));
    }
    Ok(cluster_outcomes(outcomes))
}

/// Grouping step of [`cluster_by_execution`] over precomputed outcomes.
pub fn cluster_outcomes(mut outcomes: Vec<(usize, ExecutionOutcome)>) -> Clustering {
    outcomes.sort_by_key(|(i, _)| *i);
    let mut clustering = Clustering::default();
    for (sample_index, outcome) in outcomes {
        let reason = match outcome {
            ExecutionOutcome::Success { result } => {
                match clustering
                    .clusters
                    .iter_mut()
                    .find(|c| c.result.as_ref().is_some_and(|r| results_equivalent(r, &result)))
                {
                    Some(cluster) => cluster.members.push(sample_index),
                    None => clustering.clusters.push(Cluster {
                        members: vec![sample_index],
                        row_count: Some(result.rows.len()),
                        result: Some(result),
                    }),
                }
                continue;
            }
            ExecutionOutcome::SqlError { .. } => DiscardReason::SqlError,
            ExecutionOutcome::Timeout => DiscardReason::Timeout,
            ExecutionOutcome::RowLimit => DiscardReason::RowLimit,
        };
        clustering.discarded.push(Discard { sample_index, reason });
    }
    sort_clusters(&mut clustering.clusters);
    clustering
}

fn sort_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(a.representative().cmp(&b.representative()))
    });
}

/// Picks the lowest-index member of the largest cluster; equal sizes go to
/// the cluster holding the lowest index. With no clusters, `fallback` wins
/// and the result is flagged.
pub fn select_final(clustering: Clustering, candidates: &[SqlCandidate], fallback: SqlCandidate) -> VoteResult {
    let Clustering {
        mut clusters,
        discarded,
    } = clustering;
    sort_clusters(&mut clusters);
    let winner = clusters
        .first()
        .and_then(|c| candidates.iter().find(|cand| cand.sample_index == c.representative()))
        .cloned();
    let fallback_used = winner.is_none();
    VoteResult {
        winner: winner.unwrap_or(fallback),
        clusters,
        discarded,
        fallback: fallback_used,
    }
}

/// Candidates from raw completions; unparseable ones become discards.
pub fn candidates_from_completions(texts: &[String]) -> (Vec<SqlCandidate>, Vec<Discard>) {
    let mut candidates = Vec::new();
    let mut discarded = Vec::new();
    for (i, raw) in texts.iter().enumerate() {
        match postprocess_completion(raw, i) {
            Some(c) => candidates.push(c),
            None => discarded.push(Discard {
                sample_index: i,
                reason: DiscardReason::Unparseable,
            }),
        }
    }
    (candidates, discarded)
}

fn fallback_candidate(texts: &[String], candidates: &[SqlCandidate]) -> SqlCandidate {
    candidates
        .iter()
        .find(|c| c.sample_index == 0)
        .cloned()
        .unwrap_or_else(|| SqlCandidate {
            text: texts.first().map(|t| t.trim().to_string()).unwrap_or_default(),
            sample_index: 0,
            raw_completion: texts.first().cloned().unwrap_or_default(),
        })
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Prompt, sample, post-process, cluster by execution and select.
pub fn generate_sql(
    question: &Question,
    view: &dyn SchemaView,
    backend: &dyn ChatBackend,
    prompt: &PromptConfig,
    sampling: &GenerationSampling,
    db_path: &Path,
    runner: &SqlRunner,
) -> Result<VoteResult, GenerateError> {
    let exchange = build_generation_prompt(view, question, prompt, sampling);
    let completion = complete_checked(backend, &exchange)?;
    let (candidates, mut discarded) = candidates_from_completions(&completion.texts);
    let fallback = fallback_candidate(&completion.texts, &candidates);
    if completion.texts.len() == 1 {
        let clusters = candidates
            .iter()
            .map(|c| Cluster {
                members: vec![c.sample_index],
                result: None,
                row_count: None,
            })
            .collect();
        return Ok(select_final(Clustering { clusters, discarded }, &candidates, fallback));
    }
    let mut clustering = cluster_by_execution(&candidates, db_path, runner)?;
    discarded.append(&mut clustering.discarded);
    discarded.sort_by_key(|d| d.sample_index);
    clustering.discarded = discarded;
    Ok(select_final(clustering, &candidates, fallback))
}
