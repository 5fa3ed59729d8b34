use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use narrator_cli::{
    cmd_ingest, cmd_report, cmd_run, cmd_score, cmd_serve, serve_state, CliError, Overrides,
    RatingInputs, RunConfig,
};
use narrator_core::report::TableFormat;
use narrator_core::{DatasetStore, Strategy};

#[derive(Parser)]
#[command(name = "narrator", version, about = "Explain change between before/after satellite images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Import a manifest and its images into a dataset store.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// The manifest is an upstream Levir-CC caption file.
        #[arg(long)]
        levir: bool,
    },
    /// Generate explanations for sampled pairs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        captioner: Option<String>,
        #[arg(long)]
        composer: Option<String>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        stopwords: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run file: per-item Coverage CSV plus a metric report.
    Score {
        /// Run config supplying records (its `out`), store and stopword flag.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        records: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        store: Option<PathBuf>,
        /// Coverage CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// Metric report JSON destination.
        #[arg(long)]
        report: PathBuf,
        /// Exclude the default stopword nouns (change, scene, area).
        #[arg(long)]
        stopwords: bool,
        /// Extra noun lexicon, one word per line.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Serve the rating API for a run file.
    Serve {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value = "annotations")]
        annotations: PathBuf,
        /// Defaults to the records file stem.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Restrict rating to these annotator ids (repeatable).
        #[arg(long = "annotator")]
        annotators: Vec<String>,
    },
    /// Render the results table.
    Report {
        /// Metric report JSON (repeatable).
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// Ratings ledger (repeatable).
        #[arg(long = "ratings")]
        ratings: Vec<PathBuf>,
        /// Run files the ratings refer to (repeatable).
        #[arg(long = "records")]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "plain")]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_out(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Ingest { manifest, images, store, levir } => {
            let s = cmd_ingest(&manifest, &images, &store, levir)?;
            println!("{s}");
        }
        Command::Run {
            config, seed, n, strategy, captioner, composer, cache, parallelism, stopwords, out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(Overrides {
                seed,
                n,
                strategy,
                captioner,
                composer,
                cache,
                stopwords: stopwords.then_some(true),
                out,
                parallelism,
            });
            let res = cmd_run(&cfg);
            match &res {
                Ok(o) => println!("wrote {} records to {}", o.lines.len(), cfg.out.display()),
                Err(CliError::PartialFailure { .. }) => {
                    eprintln!("wrote {} (with failures)", cfg.out.display())
                }
                Err(_) => {}
            }
            res?;
        }
        Command::Score { config, records, store, out, report, stopwords, lexicon } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let records = records
                .or_else(|| cfg.as_ref().map(|c| c.out.clone()))
                .expect("clap requires records or config");
            let store = store
                .or_else(|| cfg.as_ref().map(|c| c.store.clone()))
                .expect("clap requires store or config");
            let stopwords = stopwords || cfg.as_ref().is_some_and(|c| c.stopwords);
            let store = DatasetStore::open(&store)?;
            let s = cmd_score(&records, &store, stopwords, lexicon.as_deref())?;
            write_out(&out, &s.coverage_csv)?;
            let json = serde_json::to_string_pretty(&s.report).expect("report serializes");
            write_out(&report, &(json + "\n"))?;
            println!("scored {} items", s.report.items.len());
        }
        Command::Serve { records, store, annotations, run_id, addr, annotators } => {
            let run_id = run_id.unwrap_or_else(|| {
                records
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into())
            });
            let store = store.map(|p| DatasetStore::open(&p)).transpose()?;
            let state = serve_state(&records, &run_id, store, &annotations, &annotators)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cmd_serve(state, addr))?;
        }
        Command::Report { metrics, ratings, records, format, out } => {
            let inputs = RatingInputs { ledgers: ratings, records };
            let (_, doc) = cmd_report(&metrics, &inputs, format)?;
            match out {
                Some(p) => write_out(&p, &doc)?,
                None => print!("{doc}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
