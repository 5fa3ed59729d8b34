//! Library side of the `narrator` binary: each subcommand is a function
//! here so tests can drive it without spawning processes.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use narrator_core::annotation::{read_ledger, AnnotationError, AnnotationStore};
use narrator_core::backend::BackendError;
use narrator_core::dataset::{convert_levir_cc, import_manifest, DatasetError, DatasetManifest};
use narrator_core::metrics::LexiconTagger;
use narrator_core::metrics::{self, CoverageResult, MetricReport, MetricsError, Stopwords};
use narrator_core::report::{self, ReportError, ResultsRow, TableFormat};
use narrator_core::{build_plan, execute, Backend, DatasetStore, GenerationRecord, ResponseCache, Split};
use narrator_server::AppState;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{failed} of {total} items failed")]
    PartialFailure { failed: usize, total: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for partial run failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::PartialFailure { .. } => 2,
            _ => 1,
        }
    }
}

fn input_err(path: &Path, message: impl ToString) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

// ---- ingest ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    pub pairs: usize,
    pub by_split: BTreeMap<Split, usize>,
    pub digest: String,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "imported {} pairs", self.pairs)?;
        let parts: Vec<String> = self.by_split.iter().map(|(s, n)| format!("{s}: {n}")).collect();
        if !parts.is_empty() {
            write!(f, " ({})", parts.join(", "))?;
        }
        Ok(())
    }
}

/// Imports a manifest (or, with `levir`, an upstream Levir-CC caption file)
/// into a store.
pub fn cmd_ingest(
    manifest: &Path,
    images_root: &Path,
    store_root: &Path,
    levir: bool,
) -> Result<IngestSummary, CliError> {
    let manifest = if levir {
        let text = fs::read_to_string(manifest).map_err(|e| input_err(manifest, e))?;
        convert_levir_cc(&text)?
    } else {
        DatasetManifest::load(manifest)?
    };
    let store = import_manifest(&manifest, images_root, store_root)?;
    Ok(IngestSummary {
        pairs: store.len(),
        by_split: store.count_by_split(),
        digest: store.content_digest()?,
    })
}

// ---- run ----

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunLine {
    Ok(GenerationRecord),
    Error { pair_id: String, error: String },
}

impl RunLine {
    pub fn record(&self) -> Option<&GenerationRecord> {
        match self {
            RunLine::Ok(r) => Some(r),
            RunLine::Error { .. } => None,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub lines: Vec<RunLine>,
    pub failures: usize,
}

impl RunOutcome {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).expect("run line serializes"));
            out.push('\n');
        }
        out
    }
}

/// Builds every backend the config references. Missing credentials and
/// unknown names are config errors, raised before any request is made.
pub fn build_backends(cfg: &RunConfig) -> Result<HashMap<String, Backend>, CliError> {
    cfg.validate()?;
    let mut names = vec![cfg.composer.clone()];
    if cfg.strategy.uses_captioner() {
        names.extend(cfg.captioner.clone());
    }
    let mut out = HashMap::new();
    for name in names {
        let spec = cfg.backend(&name).expect("validated").clone();
        let b = Backend::from_spec(spec).map_err(|e| CliError::Config(format!("backend {name:?}: {e}")))?;
        out.insert(name, b);
    }
    Ok(out)
}

/// Samples pairs and runs the strategy over them on a pool of
/// `cfg.parallelism` workers. Failed items become error lines; the run
/// itself only fails on setup problems.
pub fn run_pairs(
    cfg: &RunConfig,
    store: &DatasetStore,
    captioner: &Backend,
    composer: &Backend,
    cache: &ResponseCache,
) -> Result<RunOutcome, CliError> {
    let ids = store.sample_pairs(cfg.n, cfg.seed, cfg.split)?;
    let plan = build_plan(cfg.strategy);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let lines: Vec<RunLine> = pool.install(|| {
        ids.par_iter()
            .map(|id| {
                let result = store
                    .load_pair(id)
                    .map_err(|e| e.to_string())
                    .and_then(|pair| {
                        execute(&plan, &pair, captioner, composer, cache).map_err(|e| e.to_string())
                    });
                match result {
                    Ok(rec) => RunLine::Ok(rec),
                    Err(error) => {
                        tracing::warn!(pair = %id, %error, "item failed");
                        RunLine::Error {
                            pair_id: id.clone(),
                            error,
                        }
                    }
                }
            })
            .collect()
    });
    let failures = lines.iter().filter(|l| l.record().is_none()).count();
    Ok(RunOutcome { lines, failures })
}

/// Runs a config end to end and writes the JSONL file. Returns
/// `PartialFailure` (after writing) when any item failed.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let backends = build_backends(cfg)?;
    let store = DatasetStore::open(&cfg.store)?;
    let cache = ResponseCache::open(&cfg.cache)?;
    let composer = &backends[&cfg.composer];
    let captioner = cfg
        .captioner
        .as_ref()
        .and_then(|c| backends.get(c))
        .unwrap_or(composer);
    let outcome = run_pairs(cfg, &store, captioner, composer, &cache)?;
    write_file(&cfg.out, outcome.to_jsonl().as_bytes())?;
    if outcome.failures > 0 {
        return Err(CliError::PartialFailure {
            failed: outcome.failures,
            total: outcome.lines.len(),
        });
    }
    Ok(outcome)
}

pub fn read_run(path: &Path) -> Result<Vec<RunLine>, CliError> {
    let file = fs::File::open(path).map_err(|e| input_err(path, e))?;
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(
            serde_json::from_str(&line).map_err(|e| input_err(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(lines)
}

/// Successful records of a run file; error lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>, CliError> {
    Ok(read_run(path)?
        .into_iter()
        .filter_map(|l| match l {
            RunLine::Ok(r) => Some(r),
            RunLine::Error { .. } => None,
        })
        .collect())
}

// ---- score ----

#[derive(Debug)]
pub struct ScoreOutput {
    pub coverage_csv: String,
    pub report: MetricReport,
}

/// Coverage of every successful record against the store's references.
pub fn cmd_score(
    records_path: &Path,
    store: &DatasetStore,
    stopwords: bool,
    extra_nouns: Option<&Path>,
) -> Result<ScoreOutput, CliError> {
    let records = read_records(records_path)?;
    let mut tagger = LexiconTagger::new();
    if let Some(p) = extra_nouns {
        tagger = tagger.with_extra_nouns(&fs::read_to_string(p).map_err(|e| input_err(p, e))?);
    }
    let stop = if stopwords {
        Stopwords::default_list()
    } else {
        Stopwords::none()
    };
    let results: Vec<CoverageResult> = records
        .iter()
        .map(|r| {
            metrics::coverage(&r.pair_id, &r.explanation, store.references(&r.pair_id)?, &tagger, &stop)
                .map_err(CliError::from)
        })
        .collect::<Result<_, _>>()?;
    let report = metrics::aggregate(&results, &records)?;
    Ok(ScoreOutput {
        coverage_csv: metrics::coverage_csv(&results),
        report,
    })
}

// ---- report ----

/// Ratings to join into the table: ledgers plus the run files whose
/// records they rate.
#[derive(Debug, Clone, Default)]
pub struct RatingInputs {
    pub ledgers: Vec<PathBuf>,
    pub records: Vec<PathBuf>,
}

/// Merges metric reports (one per config, typically) and renders the table.
pub fn cmd_report(
    metric_reports: &[PathBuf],
    ratings: &RatingInputs,
    format: TableFormat,
) -> Result<(Vec<ResultsRow>, String), CliError> {
    let mut merged = MetricReport {
        groups: Vec::new(),
        items: Vec::new(),
    };
    for p in metric_reports {
        let text = fs::read_to_string(p).map_err(|e| input_err(p, e))?;
        let r: MetricReport = serde_json::from_str(&text).map_err(|e| input_err(p, e))?;
        for g in r.groups {
            if merged.groups.iter().any(|m| m.key == g.key) {
                return Err(input_err(
                    p,
                    format!("group {} / {} appears twice", g.key.strategy.label(), g.key.model_chain),
                ));
            }
            merged.groups.push(g);
        }
        merged.items.extend(r.items);
    }
    let group_ratings = if ratings.ledgers.is_empty() {
        None
    } else {
        let mut records = Vec::new();
        for p in &ratings.records {
            records.extend(read_records(p)?);
        }
        let mut recs = Vec::new();
        for p in &ratings.ledgers {
            recs.extend(read_ledger(p)?);
        }
        Some(report::group_ratings(&records, &recs)?)
    };
    let rows = report::results_table(&merged, group_ratings.as_ref())?;
    let doc = report::emit(&rows, format);
    Ok((rows, doc))
}

// ---- serve ----

/// Enqueues a run file as an annotation run and returns the service state.
pub fn serve_state(
    records_path: &Path,
    run_id: &str,
    store: Option<DatasetStore>,
    annotations_dir: &Path,
    annotators: &[String],
) -> Result<AppState, CliError> {
    let records = read_records(records_path)?;
    let ann = AnnotationStore::open(annotations_dir)?;
    for a in annotators {
        ann.register_annotator(a);
    }
    let tasks = ann.enqueue_run(run_id, &records)?;
    tracing::info!(run = run_id, tasks = tasks.len(), "run enqueued");
    Ok(AppState {
        annotations: Arc::new(ann),
        dataset: store.map(Arc::new),
    })
}

pub async fn cmd_serve(state: AppState, addr: SocketAddr) -> Result<(), CliError> {
    narrator_server::serve(state, addr).await?;
    Ok(())
}
