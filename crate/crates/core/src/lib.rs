//! Zero-shot text-to-SQL over Spider-format datasets.
//!
//! The pipeline recalls the relevant tables and columns with sampled LLM
//! rankings, prompts for SQL with a clear `#`-delimited layout behind a short
//! calibration conversation, samples several queries, and keeps the one whose
//! execution result is most common. [`pipeline`] wires the stages into
//! resumable batch runs; [`eval`] scores predictions by execution accuracy.

pub mod catalog;
pub mod config;
pub mod eval;
pub mod executor;
pub mod gateway;
pub mod linking;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod scalar;
pub mod sqltext;
pub mod vote;

pub use scalar::Score;

/// Recall scores at double precision, as stored in linking artifacts.
pub type RecallScores = linking::RecallScores<f64>;
pub type LinkOutcome = linking::LinkOutcome<f64>;
pub type LabeledScores = metrics::LabeledScores<f64>;
pub type RecallAuc = eval::RecallAuc<f64>;
