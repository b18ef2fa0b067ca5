use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{by_score_then_key, ChunkKey};
use crate::error::{Error, Result};
use crate::text::LexicalTokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::Config(format!(
                "BM25 k1 must be >= 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "BM25 b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

/// Inverted index with per-record lengths. Records are numbered in insertion
/// order; postings lists are sorted by record number.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    pub(super) params: Bm25Params,
    pub(super) tokenizer: LexicalTokenizer,
    pub(super) keys: Vec<ChunkKey>,
    pub(super) lengths: Vec<u32>,
    pub(super) postings: BTreeMap<String, Vec<(u32, u32)>>,
    pub(super) total_len: u64,
}

impl Bm25Index {
    pub fn new(params: Bm25Params, tokenizer: LexicalTokenizer) -> Self {
        Bm25Index {
            params,
            tokenizer,
            keys: Vec::new(),
            lengths: Vec::new(),
            postings: BTreeMap::new(),
            total_len: 0,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn tokenizer(&self) -> &LexicalTokenizer {
        &self.tokenizer
    }

    /// Appends a record. Existing postings are never modified.
    pub fn add(&mut self, key: ChunkKey, terms: &[String]) {
        let id = self.keys.len() as u32;
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        for (term, n) in tf {
            self.postings
                .entry(term.to_string())
                .or_default()
                .push((id, n));
        }
        self.keys.push(key);
        self.lengths.push(terms.len() as u32);
        self.total_len += terms.len() as u64;
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[ChunkKey] {
        &self.keys
    }

    pub fn avgdl(&self) -> f64 {
        if self.keys.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.keys.len() as f64
        }
    }

    /// `(record number, term frequency)` pairs of `term`.
    pub fn postings(&self, term: &str) -> &[(u32, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.keys.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores `text` after tokenizing it with the index tokenizer.
    pub fn search_text(&self, text: &str) -> Vec<(ChunkKey, f64)> {
        bm25_score(self, &self.params, &self.tokenizer.tokenize(text))
    }
}

/// Okapi BM25 over the records containing at least one query term.
///
/// ```text
/// score(r) = Σ_t idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·len(r)/avgdl))
/// ```
///
/// Repeated query terms count once. Results are sorted by descending score,
/// ties by ascending key.
pub fn bm25_score(
    index: &Bm25Index,
    params: &Bm25Params,
    query_terms: &[String],
) -> Vec<(ChunkKey, f64)> {
    if index.is_empty() {
        return Vec::new();
    }
    let avgdl = index.avgdl();
    let unique: BTreeSet<&str> = query_terms.iter().map(String::as_str).collect();
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    for term in unique {
        let postings = index.postings(term);
        if postings.is_empty() {
            continue;
        }
        let idf = index.idf(term);
        for &(id, tf) in postings {
            let tf = f64::from(tf);
            let len = f64::from(index.lengths[id as usize]);
            let norm = if avgdl > 0.0 {
                1.0 - params.b + params.b * len / avgdl
            } else {
                1.0
            };
            *acc.entry(id).or_default() += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
        }
    }
    let mut out: Vec<(ChunkKey, f64)> = acc
        .into_iter()
        .map(|(id, s)| (index.keys[id as usize].clone(), s))
        .collect();
    out.sort_by(by_score_then_key);
    out
}
