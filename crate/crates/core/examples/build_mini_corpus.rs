//! Rebuilds the mini-corpus SQLite files from `fixtures/mini_corpus/sql`.
//!
//! cargo run -p c3sql-core --example build_mini_corpus

use std::fs;
use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini_corpus");
    for entry in fs::read_dir(corpus.join("sql"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("sql") {
            continue;
        }
        let db_id = path.file_stem().and_then(|s| s.to_str()).ok_or("bad file name")?;
        let dir = corpus.join("database").join(db_id);
        fs::create_dir_all(&dir)?;
        let target = dir.join(format!("{db_id}.sqlite"));
        if target.exists() {
            fs::remove_file(&target)?;
        }
        let conn = rusqlite::Connection::open(&target)?;
        conn.execute_batch(&fs::read_to_string(&path)?)?;
        conn.execute_batch("VACUUM")?;
        println!("wrote {}", target.display());
    }
    Ok(())
}
