use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/mini_corpus")
}

fn c3sql(out: &Path, args: &[&str]) -> Output {
    let c = corpus();
    Command::new(env!("CARGO_BIN_EXE_c3sql"))
        .args(args)
        .arg("--tables")
        .arg(c.join("tables.json"))
        .arg("--questions")
        .arg(c.join("dev.json"))
        .arg("--cache-dir")
        .arg(c.join("cache"))
        .arg("--out")
        .arg(out)
        .env_remove("C3SQL_BACKEND")
        .env("C3SQL_API_KEY_ENV", "C3SQL_TEST_UNSET_KEY")
        .env_remove("C3SQL_TEST_UNSET_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn replay_run_reaches_full_accuracy() {
    let out = tempfile::tempdir().unwrap();
    let o = c3sql(out.path(), &["run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("all                 10      10    1.0000"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall_ex"], 1.0);
}

#[test]
fn missing_inputs_and_keys_are_configuration_errors() {
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_c3sql")).arg("link").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--tables is required"));

    let o = c3sql(out.path(), &["link", "--backend", "live"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("C3SQL_TEST_UNSET_KEY"));
    assert!(!out.path().join("link").exists());

    let o = c3sql(out.path(), &["run", "--layout", "complicated"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cache_misses_are_partial_failures() {
    let out = tempfile::tempdir().unwrap();
    // A different sample count changes every generation fingerprint.
    let o = c3sql(out.path(), &["run", "--n-samples", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("10 failed"));
}

#[test]
fn eval_scores_an_external_predictions_file() {
    let out = tempfile::tempdir().unwrap();
    let predictions = out.path().join("mine.json");
    std::fs::write(
        &predictions,
        r#"[{"question_id": "cs_0", "sql": "SELECT count(*) FROM singer"},
            {"question_id": "ghost", "sql": "SELECT 1"}]"#,
    )
    .unwrap();
    let o = c3sql(out.path(), &["eval", "--predictions", predictions.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("all                 10       1    0.1000"), "{text}");
    assert!(text.contains("unknown question ids: ghost"), "{text}");
}

#[test]
fn dump_prompt_prints_the_conversation() {
    let out = tempfile::tempdir().unwrap();
    let o = c3sql(
        out.path(),
        &["dump-prompt", "--question", "cs_0", "--no-linking", "--no-calibration"],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("Role: USER\nContent:\n### Complete sqlite SQL query only"));
    assert!(text.contains("# singer ( singer_id, name, country, song_name, song_release_year, age, is_male )"));
    assert!(text.ends_with("### How many singers do we have?\nSELECT\n"));
}
