//! Results table: one row per (strategy, model chain) with Coverage,
//! Truthfulness, Informativeness and average explanation length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{aggregate_records, split_item_id, AnnotationError, AnnotationRecord};
use crate::metrics::{GroupKey, MetricReport};
use crate::prompting::{GenerationRecord, Strategy};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("metric report has no groups")]
    EmptyReport,
    #[error("cannot parse table: {0}")]
    Parse(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRatings {
    pub truthfulness: f64,
    pub informativeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub prompting: Strategy,
    pub model_chain: String,
    pub coverage_pct: f64,
    pub truthfulness: Option<f64>,
    pub informativeness: Option<f64>,
    pub avg_words: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Plain,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "plain" | "plain-table" | "table" => Ok(Self::Plain),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown format {s:?} (plain, csv, json)")),
        }
    }
}

/// Joins metric groups with optional rating means. Rows come out ordered
/// by strategy, then model chain.
pub fn results_table(
    metrics: &MetricReport,
    ratings: Option<&BTreeMap<GroupKey, GroupRatings>>,
) -> Result<Vec<ResultsRow>, ReportError> {
    if metrics.groups.is_empty() {
        return Err(ReportError::EmptyReport);
    }
    let mut rows: Vec<ResultsRow> = metrics
        .groups
        .iter()
        .map(|g| {
            let r = ratings.and_then(|m| m.get(&g.key));
            ResultsRow {
                prompting: g.key.strategy,
                model_chain: g.key.model_chain.clone(),
                coverage_pct: g.mean_coverage,
                truthfulness: r.map(|r| r.truthfulness),
                informativeness: r.map(|r| r.informativeness),
                avg_words: g.mean_word_count,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.prompting, &a.model_chain).cmp(&(b.prompting, &b.model_chain))
    });
    Ok(rows)
}

/// Rating means per group: item means across annotators, then the mean of
/// item means within each group. Items are matched to records by pair id.
pub fn group_ratings(
    records: &[GenerationRecord],
    ratings: &[AnnotationRecord],
) -> Result<BTreeMap<GroupKey, GroupRatings>, ReportError> {
    let group_of: BTreeMap<&str, GroupKey> = records
        .iter()
        .map(|r| (r.pair_id.as_str(), GroupKey::of(r)))
        .collect();
    let mut by_group: BTreeMap<GroupKey, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in ratings {
        let pair = split_item_id(&r.item_id).map_or(r.item_id.as_str(), |(_, p)| p);
        if let Some(key) = group_of.get(pair) {
            by_group.entry(key.clone()).or_default().push(r.clone());
        }
    }
    by_group
        .into_iter()
        .map(|(key, rs)| {
            let agg = aggregate_records(&rs)?;
            Ok((
                key,
                GroupRatings {
                    truthfulness: agg.mean_truthfulness,
                    informativeness: agg.mean_informativeness,
                },
            ))
        })
        .collect()
}

/// Two-decimal rendering with round-half-even applied to the shortest
/// decimal representation of `value`.
pub fn format_two_decimals(value: f64) -> String {
    if !value.is_finite() {
        return value.to_string();
    }
    let repr = format!("{}", value.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..2).map(|i| frac.get(i).copied().unwrap_or(0)));
    let rest = frac.get(2..).unwrap_or(&[]);
    let round_up = match rest.split_first() {
        None => false,
        Some((&first, tail)) => {
            first > 5
                || (first == 5 && tail.iter().any(|&d| d != 0))
                || (first == 5 && digits.last().is_some_and(|d| d % 2 == 1))
        }
    };
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 2;
    let int_s: String = digits[..split].iter().map(|d| char::from(b'0' + d)).collect();
    let frac_s: String = digits[split..].iter().map(|d| char::from(b'0' + d)).collect();
    let int_s = if int_s.is_empty() { "0".to_owned() } else { int_s };
    let negative = value < 0.0 && digits.iter().any(|&d| d != 0);
    format!("{}{int_s}.{frac_s}", if negative { "-" } else { "" })
}

fn cell(v: Option<f64>) -> String {
    v.map(format_two_decimals).unwrap_or_default()
}

const HEADERS: [&str; 6] = [
    "Prompting",
    "Model",
    "Coverage",
    "Truthfulness",
    "Informativeness",
    "Avg num of words",
];
const CSV_HEADER: &str = "prompting,model,coverage,truthfulness,informativeness,avg_words";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn row_cells(r: &ResultsRow) -> [String; 6] {
    [
        r.prompting.label().to_owned(),
        r.model_chain.clone(),
        format_two_decimals(r.coverage_pct),
        cell(r.truthfulness),
        cell(r.informativeness),
        format_two_decimals(r.avg_words),
    ]
}

/// Serializes rows. Plain and CSV render numbers with two decimals; JSON
/// keeps full precision. Absent ratings are `-` (plain), empty (CSV) or
/// `null` (JSON).
pub fn emit(rows: &[ResultsRow], format: TableFormat) -> String {
    match format {
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
        TableFormat::Csv => {
            let mut out = format!("{CSV_HEADER}\n");
            for r in rows {
                let cells = row_cells(r);
                let line: Vec<String> = cells.iter().map(|c| csv_field(c)).collect();
                writeln!(out, "{}", line.join(",")).unwrap();
            }
            out
        }
        TableFormat::Plain => {
            let body: Vec<[String; 6]> = rows
                .iter()
                .map(|r| {
                    let mut c = row_cells(r);
                    for v in &mut c[3..5] {
                        if v.is_empty() {
                            *v = "-".into();
                        }
                    }
                    c
                })
                .collect();
            let mut widths = HEADERS.map(|h| h.chars().count());
            for c in &body {
                for (w, v) in widths.iter_mut().zip(c) {
                    *w = (*w).max(v.chars().count());
                }
            }
            let render = |cells: &[String]| -> String {
                let parts: Vec<String> = cells
                    .iter()
                    .zip(widths)
                    .enumerate()
                    .map(|(i, (v, w))| {
                        let pad = w - v.chars().count();
                        if i < 2 {
                            format!("{v}{}", " ".repeat(pad))
                        } else {
                            format!("{}{v}", " ".repeat(pad))
                        }
                    })
                    .collect();
                parts.join(" | ").trim_end().to_owned()
            };
            let header: Vec<String> = HEADERS.iter().map(|h| h.to_string()).collect();
            let mut out = render(&header);
            out.push('\n');
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
            for c in &body {
                out.push_str(&render(c));
                out.push('\n');
            }
            out
        }
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            (c, _) => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Reads back a table produced by `emit(.., TableFormat::Csv)`.
pub fn parse_csv(text: &str) -> Result<Vec<ResultsRow>, ReportError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(ReportError::Parse("missing header".into()));
    }
    let num = |s: &str| -> Result<f64, ReportError> {
        s.parse().map_err(|_| ReportError::Parse(format!("bad number {s:?}")))
    };
    let opt = |s: &str| -> Result<Option<f64>, ReportError> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f = split_csv_line(l);
            if f.len() != 6 {
                return Err(ReportError::Parse(format!("expected 6 fields in {l:?}")));
            }
            let prompting = Strategy::ALL
                .into_iter()
                .find(|s| s.label() == f[0])
                .ok_or_else(|| ReportError::Parse(format!("unknown prompting {:?}", f[0])))?;
            Ok(ResultsRow {
                prompting,
                model_chain: f[1].clone(),
                coverage_pct: num(&f[2])?,
                truthfulness: opt(&f[3])?,
                informativeness: opt(&f[4])?,
                avg_words: num(&f[5])?,
            })
        })
        .collect()
}
