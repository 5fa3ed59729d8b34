//! Automatic evaluation: noun Coverage against reference captions, word
//! counts, Pearson correlation and per-group aggregation.

mod tagger;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{GenerationRecord, Strategy};

pub use tagger::{normalize_word, singularize, tokenize, LexiconTagger, PartOfSpeech, Tagger};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("coverage needs at least one reference caption")]
    NoReferences,
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("nothing to aggregate")]
    EmptyRun,
    #[error("coverage results and records are not aligned: {0}")]
    Misaligned(String),
}

/// Nouns removed before coverage when stopwording is enabled.
pub const DEFAULT_STOPWORDS: [&str; 3] = ["change", "scene", "area"];

/// Normalized stopword set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stopwords(BTreeSet<String>);

impl Stopwords {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn default_list() -> Self {
        Self::from_words(DEFAULT_STOPWORDS)
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            words
                .into_iter()
                .map(|w| normalize_word(w.as_ref().trim()))
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.0.contains(normalized)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NounSource {
    References,
    Explanation,
}

/// Unique normalized nouns (lowercase, singular, trimmed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounSet {
    pub nouns: BTreeSet<String>,
    pub source: NounSource,
}

impl NounSet {
    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    pub fn contains(&self, noun: &str) -> bool {
        self.nouns.contains(noun)
    }
}

/// Tokens the tagger marks as nouns, normalized, minus stopwords.
pub fn extract_nouns(
    text: &str,
    tagger: &dyn Tagger,
    stopwords: &Stopwords,
    source: NounSource,
) -> NounSet {
    let nouns = tagger
        .tag(text)
        .into_iter()
        .filter(|(_, pos)| *pos == PartOfSpeech::Noun)
        .map(|(tok, _)| normalize_word(tok.trim()))
        .filter(|n| !n.is_empty() && !stopwords.contains(n))
        .collect();
    NounSet { nouns, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub pair_id: String,
    pub covered: usize,
    pub total: usize,
    pub percent: f64,
    /// The references yielded no nouns; `percent` is reported as 0.
    #[serde(default)]
    pub degenerate: bool,
}

/// Percentage of the reference noun union that appears among the
/// explanation's normalized tokens.
pub fn coverage(
    pair_id: &str,
    explanation: &str,
    references: &[String],
    tagger: &dyn Tagger,
    stopwords: &Stopwords,
) -> Result<CoverageResult, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let mut union = BTreeSet::new();
    for r in references {
        union.extend(extract_nouns(r, tagger, stopwords, NounSource::References).nouns);
    }
    let present: BTreeSet<String> = tokenize(explanation).map(normalize_word).collect();
    let covered = union.iter().filter(|n| present.contains(*n)).count();
    let total = union.len();
    let percent = if total == 0 {
        0.0
    } else {
        100.0 * covered as f64 / total as f64
    };
    Ok(CoverageResult {
        pair_id: pair_id.to_owned(),
        covered,
        total,
        percent,
        degenerate: total == 0,
    })
}

/// Number of maximal whitespace-delimited tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Sample Pearson correlation coefficient, clamped to [-1, 1].
pub fn pearson<T: Float>(xs: &[T], ys: &[T]) -> Result<T, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::DegenerateSeries(format!(
            "length mismatch {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(MetricsError::DegenerateSeries(
            "need at least two observations".into(),
        ));
    }
    let n = T::from(xs.len()).expect("length fits the float type");
    let mean = |v: &[T]| v.iter().fold(T::zero(), |a, &b| a + b) / n;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(MetricsError::DegenerateSeries("constant series".into()));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Float>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let n = T::from(values.len())?;
    Some(values.iter().fold(T::zero(), |a, &b| a + b) / n)
}

/// Identity of a results-table row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub strategy: Strategy,
    pub model_chain: String,
}

impl GroupKey {
    pub fn of(record: &GenerationRecord) -> Self {
        Self {
            strategy: record.strategy,
            model_chain: record.model_chain(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricGroup {
    #[serde(flatten)]
    pub key: GroupKey,
    pub n_items: usize,
    pub mean_coverage: f64,
    pub mean_word_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub groups: Vec<MetricGroup>,
    pub items: Vec<CoverageResult>,
}

/// Means of coverage and word count per (strategy, model chain).
/// `results[i]` must score `records[i]`.
pub fn aggregate(
    results: &[CoverageResult],
    records: &[GenerationRecord],
) -> Result<MetricReport, MetricsError> {
    if results.is_empty() || records.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    if results.len() != records.len() {
        return Err(MetricsError::Misaligned(format!(
            "{} results for {} records",
            results.len(),
            records.len()
        )));
    }
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (res, rec) in results.iter().zip(records) {
        if res.pair_id != rec.pair_id {
            return Err(MetricsError::Misaligned(format!(
                "result {} paired with record {}",
                res.pair_id, rec.pair_id
            )));
        }
        let g = groups.entry(GroupKey::of(rec)).or_default();
        g.0.push(res.percent);
        g.1.push(rec.word_count as f64);
    }
    let groups = groups
        .into_iter()
        .map(|(key, (cov, words))| MetricGroup {
            key,
            n_items: cov.len(),
            mean_coverage: mean(&cov).unwrap_or(0.0),
            mean_word_count: mean(&words).unwrap_or(0.0),
        })
        .collect();
    Ok(MetricReport {
        groups,
        items: results.to_vec(),
    })
}

/// `pair_id,covered,total,percent` with a header row.
pub fn coverage_csv(results: &[CoverageResult]) -> String {
    let mut out = String::from("pair_id,covered,total,percent\n");
    for r in results {
        writeln!(out, "{},{},{},{}", r.pair_id, r.covered, r.total, r.percent).unwrap();
    }
    out
}
