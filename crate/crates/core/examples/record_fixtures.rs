//! Regenerates the mini-corpus completion cache by running the default
//! pipeline against the scripted stand-in backend with recording enabled.
//!
//! cargo run -p c3sql-core --example record_fixtures

#[path = "../tests/support/mod.rs"]
mod support;

use std::fs;

use c3sql_core::config::PipelineConfig;
use c3sql_core::gateway::{CacheStore, RecordBackend};
use c3sql_core::pipeline::Pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = support::corpus_dir();
    let cache = corpus.join("cache");
    if cache.exists() {
        fs::remove_dir_all(&cache)?;
    }
    let dataset = support::load_corpus();
    let config = PipelineConfig {
        cache_dir: cache.clone(),
        force: true,
        ..PipelineConfig::default()
    };
    let backend = RecordBackend::new(support::ScriptedLlm::new().into_backend(), CacheStore::new(&cache));
    let out = tempfile::tempdir()?;
    let pipeline = Pipeline::new(&dataset, &config, &backend, out.path())?;
    let (summary, report) = pipeline.run()?;
    let expected = corpus.join("expected");
    fs::create_dir_all(&expected)?;
    for name in ["predictions.json", "report.json", "report.txt"] {
        fs::copy(out.path().join(name), expected.join(name))?;
    }
    println!(
        "cached {} exchanges; {} failures; EX = {:?}",
        fs::read_dir(&cache)?.count(),
        summary.failures.len(),
        report.overall_ex
    );
    Ok(())
}
