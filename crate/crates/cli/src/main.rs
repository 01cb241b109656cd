use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tabqa_core::bench::{self, BenchOptions, RunError, Workspace};
use tabqa_core::config::{ExecutionMode, RunConfig};
use tabqa_core::dataset::DatasetStore;
use tabqa_core::llm::FixtureMode;
use tabqa_core::pipeline::AnswerType;

/// Answer questions about tabular data with generated SQL.
#[derive(Parser, Debug)]
#[command(name = "tabqa", version)]
struct Cli {
    /// Run configuration (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Database file; overrides `db_path`.
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Directory for predictions, traces and summaries.
    #[arg(long, global = true, default_value = "tabqa-out")]
    out: PathBuf,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ProviderArgs {
    /// Serve completions from recorded fixtures only.
    #[arg(long, value_name = "DIR", conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Call the live provider and store every response in DIR.
    #[arg(long, value_name = "DIR")]
    record: Option<PathBuf>,
    /// Run on Lite samples of at most 20 rows per dataset.
    #[arg(long)]
    lite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a delimited file as a dataset.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// List ingested datasets.
    List,
    /// Answer one question about an ingested dataset.
    Ask {
        dataset_id: String,
        question: String,
        /// Expected answer type: boolean, category, number, list_category,
        /// list_number.
        #[arg(long = "type", value_parser = parse_answer_type)]
        answer_type: Option<AnswerType>,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Run a question set and score it against gold answers.
    Bench {
        questions: PathBuf,
        gold: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        /// Exact comparison, without tolerance or case folding.
        #[arg(long)]
        strict: bool,
        /// Ingest `<DIR>/<dataset>.csv` for datasets not yet loaded.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Process questions one at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Per-stage statistics of a trace file.
    Report { trace: PathBuf },
}

fn parse_answer_type(s: &str) -> Result<AnswerType, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown answer type {s:?}"))
}

fn load_config(cli: &Cli, provider: Option<&ProviderArgs>) -> Result<RunConfig, RunError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(db) = &cli.db {
        config.db_path = db.clone();
    }
    if let Some(p) = provider {
        if let Some(dir) = &p.replay {
            config.mode = FixtureMode::Replay;
            config.fixture_dir = Some(dir.clone());
        }
        if let Some(dir) = &p.record {
            config.mode = FixtureMode::Record;
            config.fixture_dir = Some(dir.clone());
        }
        config.lite |= p.lite;
    }
    config.validate()?;
    Ok(config)
}

fn create_out(dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|source| RunError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

fn run(cli: &Cli) -> Result<(), RunError> {
    match &cli.command {
        Command::Ingest { file, id } => {
            let config = load_config(cli, None)?;
            let store = DatasetStore::open(&config.db_path)?;
            let h = store.ingest(file, id)?;
            println!(
                "{}\ttable={}\trows={}\tsource={}",
                h.dataset_id,
                h.table_name,
                h.row_count,
                h.origin_path.display()
            );
        }
        Command::List => {
            let config = load_config(cli, None)?;
            let store = DatasetStore::open(&config.db_path)?;
            for h in store.list()? {
                println!("{}\ttable={}\trows={}", h.dataset_id, h.table_name, h.row_count);
            }
        }
        Command::Ask {
            dataset_id,
            question,
            answer_type,
            provider,
        } => {
            let config = load_config(cli, Some(provider))?;
            let ws = Workspace::open(config)?;
            let outcome = ws.ask(dataset_id, question, *answer_type)?;
            create_out(&cli.out)?;
            let trace = cli.out.join("ask-trace.jsonl");
            bench::write_trace(&trace, std::slice::from_ref(&outcome))?;
            println!("{}", outcome.prediction_line());
            println!("status: {}", outcome.final_status.as_str());
            println!("trace: {}", trace.display());
        }
        Command::Bench {
            questions,
            gold,
            provider,
            strict,
            data_dir,
            sequential,
        } => {
            let mut config = load_config(cli, Some(provider))?;
            if *sequential {
                config.execution = ExecutionMode::Sequential;
            }
            config.validate_for_bench()?;
            let ws = Workspace::open(config)?;
            let opts = BenchOptions {
                strict: *strict,
                data_dir: data_dir.clone(),
            };
            let run = bench::run_bench(&ws, questions, gold, &cli.out, &opts)?;
            let s = &run.summary;
            println!(
                "accuracy: {:.4} ({}/{}){}",
                s.accuracy,
                s.correct,
                s.report.questions,
                if s.strict { " strict" } else { "" }
            );
            println!(
                "approved first pass: {}, after reprocess: {}, failed: {}",
                s.report.approved_first_pass, s.report.approved_after_reprocess, s.report.failed
            );
            if !s.tables_unchanged {
                log::warn!("a dataset table changed during the run");
            }
            println!("predictions: {}", run.predictions_path.display());
            println!("trace: {}", run.trace_path.display());
            println!("summary: {}", run.summary_path.display());
        }
        Command::Report { trace } => {
            let outcomes = bench::load_trace(trace)?;
            let r = bench::report(&outcomes);
            println!("questions: {}", r.questions);
            println!("approved first pass: {}", r.approved_first_pass);
            println!("approved after reprocess: {}", r.approved_after_reprocess);
            println!("failed: {}", r.failed);
            println!("flag rate: {:.4} ({}/{})", r.flag_rate, r.flagged_first_pass, r.questions);
            println!(
                "recovery rate: {:.4} ({}/{})",
                r.recovery_rate, r.approved_after_reprocess, r.flagged_first_pass
            );
            println!("sql error rate: {:.4} ({}/{} attempts)", r.sql_error_rate, r.sql_errors, r.attempts);
            println!("provider errors: {}", r.provider_errors);
            for (dataset, rows) in &r.rows_by_dataset {
                println!("rows[{dataset}]: {rows}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(&e, RunError::Config(m) if m.contains(tabqa_core::llm::API_KEY_ENV)) {
                eprintln!("hint: {}", bench::missing_key_hint());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
