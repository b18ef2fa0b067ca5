//! NDCG, MAP and F1 at rank cutoffs over document rankings.
//!
//! Conventions: NDCG uses linear gain `rel_i` and discount `log2(i + 1)`,
//! with the ideal DCG taken over every judged grade for the query. MAP and F1
//! count a document as relevant when its grade reaches the relevance
//! threshold (default 1); AP@k is normalized by `min(R, k)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::QrelSet;
use crate::error::{Error, Result};
use crate::retrieval::DocRanking;

pub type Judgments = BTreeMap<String, u32>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CutoffSet(Vec<usize>);

impl Default for CutoffSet {
    fn default() -> Self {
        CutoffSet(vec![5, 10])
    }
}

impl CutoffSet {
    pub fn new(ks: Vec<usize>) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) || !ks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "cutoffs must be positive, strictly increasing and non-empty, got {ks:?}"
            )));
        }
        Ok(CutoffSet(ks))
    }

    pub fn ks(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        self.0.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        CutoffSet::new(self.0.clone()).map(|_| ())
    }
}

fn top_k(ranking: &DocRanking, k: usize) -> impl Iterator<Item = &String> {
    ranking.ids().take(k)
}

fn relevant_count(judgments: &Judgments, threshold: u32) -> usize {
    judgments.values().filter(|&&g| g >= threshold).count()
}

pub fn ndcg_at_k(ranking: &DocRanking, judgments: &Judgments, k: usize) -> f64 {
    let discount = |i: usize| ((i + 2) as f64).log2();
    let dcg: f64 = top_k(ranking, k)
        .enumerate()
        .map(|(i, d)| f64::from(judgments.get(d).copied().unwrap_or(0)) / discount(i))
        .sum();
    let mut grades: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| f64::from(g) / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn map_at_k(ranking: &DocRanking, judgments: &Judgments, k: usize, threshold: u32) -> f64 {
    let r = relevant_count(judgments, threshold);
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in top_k(ranking, k).enumerate() {
        if judgments.get(d).is_some_and(|&g| g >= threshold) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r.min(k) as f64
}

pub fn f1_at_k(ranking: &DocRanking, judgments: &Judgments, k: usize, threshold: u32) -> f64 {
    let r = relevant_count(judgments, threshold);
    let hits = top_k(ranking, k)
        .filter(|d| judgments.get(*d).is_some_and(|&g| g >= threshold))
        .count();
    if hits == 0 || r == 0 {
        return 0.0;
    }
    let precision = hits as f64 / k as f64;
    let recall = hits as f64 / r as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean metrics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    /// Chunking method: FUC, SUC, FCC or SCC.
    pub chunking: String,
    /// Retrieval method: TR or RFR.
    pub retrieval: String,
    /// `"ndcg@5"` etc. to the mean over evaluated queries.
    pub metrics: BTreeMap<String, f64>,
    pub cutoffs: CutoffSet,
    pub relevance_threshold: u32,
    pub query_count: usize,
    /// Queries left out because they have no relevant document.
    pub skipped_queries: Vec<String>,
}

impl MetricsReport {
    pub fn config_label(&self) -> String {
        format!("{} {}×{}", self.model, self.chunking, self.retrieval)
    }

    pub fn get(&self, metric: &str, k: usize) -> Option<f64> {
        self.metrics.get(&format!("{metric}@{k}")).copied()
    }
}

pub const METRIC_NAMES: [&str; 3] = ["ndcg", "map", "f1"];

/// Per-metric means over queries that have at least one relevant document.
/// Rankings for queries without any relevant judgment are skipped and listed.
pub fn evaluate_run(
    rankings: &BTreeMap<String, DocRanking>,
    qrels: &QrelSet,
    cutoffs: &CutoffSet,
    relevance_threshold: u32,
) -> Result<MetricsReport> {
    if rankings.is_empty() {
        return Err(Error::Argument("no query rankings to evaluate".into()));
    }
    let empty = Judgments::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut evaluated = 0usize;
    let mut skipped = Vec::new();
    for (qid, ranking) in rankings {
        let judgments = qrels.for_query(qid).unwrap_or(&empty);
        if relevant_count(judgments, relevance_threshold.max(1)) == 0 {
            skipped.push(qid.clone());
            continue;
        }
        evaluated += 1;
        for &k in cutoffs.ks() {
            *sums.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(ranking, judgments, k);
            *sums.entry(format!("map@{k}")).or_default() +=
                map_at_k(ranking, judgments, k, relevance_threshold);
            *sums.entry(format!("f1@{k}")).or_default() +=
                f1_at_k(ranking, judgments, k, relevance_threshold);
        }
    }
    if evaluated == 0 {
        return Err(Error::Validation(format!(
            "none of the {} queries has a relevant document",
            rankings.len()
        )));
    }
    let metrics = sums
        .into_iter()
        .map(|(name, s)| (name, s / evaluated as f64))
        .collect();
    Ok(MetricsReport {
        model: String::new(),
        chunking: String::new(),
        retrieval: String::new(),
        metrics,
        cutoffs: cutoffs.clone(),
        relevance_threshold,
        query_count: evaluated,
        skipped_queries: skipped,
    })
}

/// Column order of the text table: every metric at the first cutoff, then
/// at the next, and so on.
fn columns(reports: &[MetricsReport]) -> Vec<(String, String)> {
    let cutoffs = reports
        .first()
        .map(|r| r.cutoffs.ks().to_vec())
        .unwrap_or_default();
    cutoffs
        .iter()
        .flat_map(|k| {
            METRIC_NAMES
                .iter()
                .map(move |m| (format!("{m}@{k}"), format!("{}@{k}", m.to_uppercase())))
        })
        .collect()
}

/// Aligned plain-text table with one row per configuration: model,
/// chunking method, retrieval method, then the metric columns.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let cols = columns(reports);
    let mut rows: Vec<Vec<String>> = vec![["Model", "CM", "RM"]
        .into_iter()
        .map(String::from)
        .chain(cols.iter().map(|(_, h)| h.clone()))
        .collect()];
    for r in reports {
        let mut row = vec![r.model.clone(), r.chunking.clone(), r.retrieval.clone()];
        row.extend(cols.iter().map(|(key, _)| {
            r.metrics
                .get(key)
                .map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
        }));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c < 3 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// One JSON object per report, one per line.
pub fn render_jsonl(reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect()
}
