use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use c3sql_core::config::{BackendKind, PipelineConfig};
use c3sql_core::eval::{render_report, EvalReport, ReportFormat};
use c3sql_core::metrics::AucPooling;
use c3sql_core::pipeline::{build_backend, Dataset, Pipeline, PipelineError, PromptKind, StageSummary};
use c3sql_core::prompt::Layout;

/// Zero-shot text-to-SQL over Spider-format datasets.
#[derive(Parser, Debug)]
#[command(name = "c3sql", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file; CLI flags override it, and it
    /// overrides built-in defaults. `C3SQL_*` variables sit in between.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Spider-format tables.json.
    #[arg(long, global = true)]
    tables: Option<PathBuf>,
    /// Spider-format question file (dev.json).
    #[arg(long, global = true)]
    questions: Option<PathBuf>,
    /// Directory holding `<db_id>/<db_id>.sqlite` (default: `database/`
    /// next to tables.json).
    #[arg(long, global = true)]
    db_dir: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// live, record or replay.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_samples: Option<u32>,
    #[arg(long, global = true)]
    no_calibration: bool,
    #[arg(long, global = true)]
    no_linking: bool,
    #[arg(long, global = true)]
    no_self_consistency: bool,
    #[arg(long, global = true)]
    no_foreign_keys: bool,
    /// clear or complicated.
    #[arg(long, global = true)]
    layout: Option<Layout>,
    /// Recompute artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Average per-question AUCs instead of pooling all items.
    #[arg(long, global = true)]
    auc_macro: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Recall tables and columns for every question.
    Link,
    /// Sample SQL, vote by execution, write predictions.json.
    Generate,
    /// Score a predictions file by execution accuracy.
    Eval {
        /// Defaults to `<out>/predictions.json`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Link, generate and evaluate.
    Run,
    /// Print the prompt that would be sent for one question.
    DumpPrompt {
        #[arg(long)]
        question: String,
        /// table-recall, column-recall or generation.
        #[arg(long, default_value = "generation")]
        kind: PromptKind,
    },
}

impl Common {
    fn pipeline_config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut config = PipelineConfig::layered(self.config.as_deref())?;
        if let Some(backend) = self.backend {
            config.backend = backend;
        }
        if let Some(dir) = &self.cache_dir {
            config.cache_dir = dir.clone();
        }
        if let Some(n) = self.n_samples {
            config.n_samples = n;
        }
        if let Some(layout) = self.layout {
            config.layout = layout;
        }
        config.use_calibration &= !self.no_calibration;
        config.use_linking &= !self.no_linking;
        config.use_self_consistency &= !self.no_self_consistency;
        config.use_foreign_keys &= !self.no_foreign_keys;
        config.force |= self.force;
        if self.auc_macro {
            config.auc_pooling = AucPooling::Macro;
        }
        config.validate()?;
        Ok(config)
    }

    fn dataset(&self) -> Result<Dataset, PipelineError> {
        let missing = |flag: &str| PipelineError::Config(format!("--{flag} is required"));
        let tables = self.tables.as_deref().ok_or_else(|| missing("tables"))?;
        let questions = self.questions.as_deref().ok_or_else(|| missing("questions"))?;
        Dataset::load(tables, questions, self.db_dir.as_deref())
    }
}

fn print_summary(stage: &str, summary: &StageSummary) {
    println!(
        "{stage}: {} processed, {} skipped, {} failed",
        summary.processed,
        summary.skipped,
        summary.failures.len()
    );
    for f in &summary.failures {
        println!("  {} {}: {}", f.stage, f.question_id, f.message);
    }
}

fn print_report(report: &EvalReport) {
    print!(
        "{}",
        String::from_utf8_lossy(&render_report(report, ReportFormat::Text))
    );
}

fn run(cli: &Cli) -> Result<i32, PipelineError> {
    let config = cli.common.pipeline_config()?;
    let dataset = cli.common.dataset()?;
    // Evaluation and prompt dumps never call the model.
    let needs_model = matches!(cli.command, Command::Link | Command::Generate | Command::Run);
    let replay_config = PipelineConfig {
        backend: BackendKind::Replay,
        ..config.clone()
    };
    let backend = build_backend(if needs_model { &config } else { &replay_config })?;
    let pipeline = Pipeline::new(&dataset, &config, backend.as_ref(), &cli.common.out)?;
    match &cli.command {
        Command::Link => {
            let summary = pipeline.link()?;
            print_summary("link", &summary);
            Ok(summary.exit_code())
        }
        Command::Generate => {
            let summary = pipeline.generate()?;
            print_summary("generate", &summary);
            Ok(summary.exit_code())
        }
        Command::Eval { predictions } => {
            let path = predictions.clone().unwrap_or_else(|| pipeline.out.predictions());
            let report = pipeline.evaluate(&path)?;
            print_report(&report);
            Ok(0)
        }
        Command::Run => {
            let (summary, report) = pipeline.run()?;
            print_summary("run", &summary);
            print_report(&report);
            Ok(summary.exit_code())
        }
        Command::DumpPrompt { question, kind } => {
            println!("{}", pipeline.dump_prompt(question, *kind)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
