//! Human Truthfulness/Informativeness ratings.
//!
//! Each run keeps an append-only ledger `ratings-<run>.jsonl`; the in-memory
//! state is the last write per (item, annotator). The ledger is compacted
//! to that state on load and whenever it has grown to twice the state size.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::write_atomic;
use crate::metrics::{mean, pearson};
use crate::prompting::{GenerationRecord, Strategy};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("score {0} is outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("run {0:?} is already enqueued")]
    DuplicateRun(String),
    #[error("invalid run: {0}")]
    InvalidRun(String),
    #[error("no ratings recorded")]
    NoRatings,
    #[error("ledger {}: {message}", path.display())]
    Ledger { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A rating on the 1–5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Score(u8);

impl Score {
    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Score {
    type Error = AnnotationError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        if (1..=5).contains(&v) {
            Ok(Score(v as u8))
        } else {
            Err(AnnotationError::ScoreOutOfRange(v))
        }
    }
}

impl From<Score> for u8 {
    fn from(s: Score) -> u8 {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub annotator_id: String,
    pub truthfulness: Score,
    pub informativeness: Score,
    pub submitted_at: DateTime<Utc>,
}

/// Unvalidated rating as it arrives over the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub item_id: String,
    pub annotator_id: String,
    pub truthfulness: i64,
    pub informativeness: i64,
    #[serde(default)]
    pub submitted_at: Option<DateTime<Utc>>,
}

impl RatingSubmission {
    pub fn validate(self) -> Result<AnnotationRecord, AnnotationError> {
        Ok(AnnotationRecord {
            truthfulness: Score::try_from(self.truthfulness)?,
            informativeness: Score::try_from(self.informativeness)?,
            item_id: self.item_id,
            annotator_id: self.annotator_id,
            submitted_at: self.submitted_at.unwrap_or_else(Utc::now),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub item_id: String,
    pub run_id: String,
    pub pair_id: String,
    pub position: usize,
    pub strategy: Strategy,
    pub model_chain: String,
    pub explanation: String,
    pub status: TaskStatus,
}

pub fn item_id(run_id: &str, pair_id: &str) -> String {
    format!("{run_id}:{pair_id}")
}

/// Splits an item id into (run, pair).
pub fn split_item_id(item_id: &str) -> Option<(&str, &str)> {
    item_id.split_once(':')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAggregate {
    pub item_id: String,
    pub mean_truthfulness: f64,
    pub mean_informativeness: f64,
    pub n_annotators: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRatings {
    pub items: Vec<RatingAggregate>,
    /// Mean of the item means.
    pub mean_truthfulness: f64,
    pub mean_informativeness: f64,
    /// Correlation of per-item mean Truthfulness vs Informativeness; absent
    /// when the series are degenerate.
    pub pearson: Option<f64>,
}

/// Per-item annotator means, run means of item means, and the item-level
/// correlation. Each (item, annotator) pair must appear at most once.
pub fn aggregate_records<'a, I>(records: I) -> Result<RunRatings, AnnotationError>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    let mut per_item: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        per_item.entry(r.item_id.as_str()).or_default().push(r);
    }
    if per_item.is_empty() {
        return Err(AnnotationError::NoRatings);
    }
    let items: Vec<RatingAggregate> = per_item
        .into_iter()
        .map(|(item, rs)| {
            let t: Vec<f64> = rs.iter().map(|r| r.truthfulness.get() as f64).collect();
            let i: Vec<f64> = rs.iter().map(|r| r.informativeness.get() as f64).collect();
            RatingAggregate {
                item_id: item.to_owned(),
                mean_truthfulness: mean(&t).expect("non-empty"),
                mean_informativeness: mean(&i).expect("non-empty"),
                n_annotators: rs.len(),
            }
        })
        .collect();
    let t: Vec<f64> = items.iter().map(|a| a.mean_truthfulness).collect();
    let i: Vec<f64> = items.iter().map(|a| a.mean_informativeness).collect();
    Ok(RunRatings {
        mean_truthfulness: mean(&t).expect("non-empty"),
        mean_informativeness: mean(&i).expect("non-empty"),
        pearson: pearson(&t, &i).ok(),
        items,
    })
}

/// Reads a ledger and resolves it to the last write per (item, annotator).
pub fn read_ledger(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let file = fs::File::open(path)?;
    let mut latest: BTreeMap<(String, String), AnnotationRecord> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| AnnotationError::Ledger {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?;
        latest.insert((rec.item_id.clone(), rec.annotator_id.clone()), rec);
    }
    Ok(latest.into_values().collect())
}

pub fn ledger_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("ratings-{run_id}.jsonl"))
}

#[derive(Debug)]
struct RunState {
    tasks: Vec<Task>,
    index: HashMap<String, usize>,
    ratings: BTreeMap<(String, String), AnnotationRecord>,
    ledger: PathBuf,
    ledger_lines: usize,
}

impl RunState {
    fn compact(&mut self) -> Result<(), AnnotationError> {
        let mut buf = Vec::new();
        for r in self.ratings.values() {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        write_atomic(&self.ledger, &buf)?;
        self.ledger_lines = self.ratings.len();
        Ok(())
    }
}

/// Rating store for any number of runs.
#[derive(Debug)]
pub struct AnnotationStore {
    dir: PathBuf,
    /// `None` accepts any annotator id.
    annotators: RwLock<Option<BTreeSet<String>>>,
    runs: RwLock<HashMap<String, Arc<RwLock<RunState>>>>,
}

impl AnnotationStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AnnotationError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            annotators: RwLock::new(None),
            runs: RwLock::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Restricts the store to registered annotators from now on.
    pub fn register_annotator(&self, annotator_id: &str) {
        let mut a = self.annotators.write().expect("annotator lock poisoned");
        a.get_or_insert_with(BTreeSet::new)
            .insert(annotator_id.to_owned());
    }

    fn check_annotator(&self, annotator_id: &str) -> Result<(), AnnotationError> {
        let a = self.annotators.read().expect("annotator lock poisoned");
        match &*a {
            Some(set) if !set.contains(annotator_id) => {
                Err(AnnotationError::UnknownAnnotator(annotator_id.to_owned()))
            }
            _ if annotator_id.trim().is_empty() => {
                Err(AnnotationError::UnknownAnnotator(annotator_id.to_owned()))
            }
            _ => Ok(()),
        }
    }

    fn run(&self, run_id: &str) -> Result<Arc<RwLock<RunState>>, AnnotationError> {
        self.runs
            .read()
            .expect("run map poisoned")
            .get(run_id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownRun(run_id.to_owned()))
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.runs.read().expect("run map poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Creates one pending task per record, ordered by pair id. Ratings left
    /// in an existing ledger for this run are loaded.
    pub fn enqueue_run(
        &self,
        run_id: &str,
        records: &[GenerationRecord],
    ) -> Result<Vec<Task>, AnnotationError> {
        if records.is_empty() {
            return Err(AnnotationError::InvalidRun("no records to annotate".into()));
        }
        if run_id.is_empty() || run_id.contains([':', '/', '\\']) {
            return Err(AnnotationError::InvalidRun(format!(
                "run id {run_id:?} must be non-empty without ':' or path separators"
            )));
        }
        let mut runs = self.runs.write().expect("run map poisoned");
        if runs.contains_key(run_id) {
            return Err(AnnotationError::DuplicateRun(run_id.to_owned()));
        }
        let mut sorted: Vec<&GenerationRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        if let Some(w) = sorted.windows(2).find(|w| w[0].pair_id == w[1].pair_id) {
            return Err(AnnotationError::InvalidRun(format!(
                "pair {:?} appears twice",
                w[0].pair_id
            )));
        }
        let tasks: Vec<Task> = sorted
            .iter()
            .enumerate()
            .map(|(position, r)| Task {
                item_id: item_id(run_id, &r.pair_id),
                run_id: run_id.to_owned(),
                pair_id: r.pair_id.clone(),
                position,
                strategy: r.strategy,
                model_chain: r.model_chain(),
                explanation: r.explanation.clone(),
                status: TaskStatus::Pending,
            })
            .collect();
        let index = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.item_id.clone(), i))
            .collect();

        let ledger = ledger_path(&self.dir, run_id);
        let mut state = RunState {
            tasks: tasks.clone(),
            index,
            ratings: BTreeMap::new(),
            ledger: ledger.clone(),
            ledger_lines: 0,
        };
        if ledger.exists() {
            for r in read_ledger(&ledger)? {
                if state.index.contains_key(&r.item_id) {
                    state
                        .ratings
                        .insert((r.item_id.clone(), r.annotator_id.clone()), r);
                }
            }
        }
        state.compact()?;
        runs.insert(run_id.to_owned(), Arc::new(RwLock::new(state)));
        Ok(tasks)
    }

    pub fn tasks(&self, run_id: &str) -> Result<Vec<Task>, AnnotationError> {
        let run = self.run(run_id)?;
        let state = run.read().expect("run lock poisoned");
        Ok(state.tasks.clone())
    }

    pub fn task(&self, item_id: &str) -> Result<Task, AnnotationError> {
        let (run_id, _) =
            split_item_id(item_id).ok_or_else(|| AnnotationError::UnknownItem(item_id.into()))?;
        let run = self
            .run(run_id)
            .map_err(|_| AnnotationError::UnknownItem(item_id.into()))?;
        let state = run.read().expect("run lock poisoned");
        state
            .index
            .get(item_id)
            .map(|&i| state.tasks[i].clone())
            .ok_or_else(|| AnnotationError::UnknownItem(item_id.into()))
    }

    /// Lowest-ordered task this annotator has not rated, or `None` when
    /// they have rated everything. The returned task's status is from the
    /// annotator's point of view.
    pub fn next_item(
        &self,
        run_id: &str,
        annotator_id: &str,
    ) -> Result<Option<Task>, AnnotationError> {
        self.check_annotator(annotator_id)?;
        let run = self.run(run_id)?;
        let state = run.read().expect("run lock poisoned");
        Ok(state
            .tasks
            .iter()
            .find(|t| {
                !state
                    .ratings
                    .contains_key(&(t.item_id.clone(), annotator_id.to_owned()))
            })
            .cloned())
    }

    /// (done, total) for one annotator.
    pub fn progress(&self, run_id: &str, annotator_id: &str) -> Result<(usize, usize), AnnotationError> {
        let run = self.run(run_id)?;
        let state = run.read().expect("run lock poisoned");
        let done = state
            .ratings
            .keys()
            .filter(|(_, a)| a == annotator_id)
            .count();
        Ok((done, state.tasks.len()))
    }

    /// Validates and persists one rating; a resubmission for the same
    /// (item, annotator) replaces the earlier one.
    pub fn submit_rating(
        &self,
        run_id: &str,
        submission: RatingSubmission,
    ) -> Result<AnnotationRecord, AnnotationError> {
        let record = submission.validate()?;
        self.check_annotator(&record.annotator_id)?;
        let run = self.run(run_id)?;
        let mut state = run.write().expect("run lock poisoned");
        if !state.index.contains_key(&record.item_id) {
            return Err(AnnotationError::UnknownItem(record.item_id));
        }
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&state.ledger)?;
        f.write_all(&line)?;
        f.sync_data()?;
        state.ledger_lines += 1;
        state.ratings.insert(
            (record.item_id.clone(), record.annotator_id.clone()),
            record.clone(),
        );
        if state.ledger_lines >= 2 * state.ratings.len().max(8) {
            state.compact()?;
        }
        Ok(record)
    }

    pub fn ratings(&self, run_id: &str) -> Result<Vec<AnnotationRecord>, AnnotationError> {
        let run = self.run(run_id)?;
        let state = run.read().expect("run lock poisoned");
        Ok(state.ratings.values().cloned().collect())
    }

    pub fn aggregate_ratings(&self, run_id: &str) -> Result<RunRatings, AnnotationError> {
        aggregate_records(&self.ratings(run_id)?)
    }

    pub fn compact(&self, run_id: &str) -> Result<(), AnnotationError> {
        let run = self.run(run_id)?;
        let mut state = run.write().expect("run lock poisoned");
        state.compact()
    }
}
