//! The two retrieval indexes built over the same chunk records: an Okapi
//! BM25 inverted index and an exact dense index of unit vectors.

mod bm25;
mod dense;
mod snapshot;

pub use bm25::{bm25_score, Bm25Index, Bm25Params};
pub use dense::{dense_search, DenseIndex};
pub use snapshot::{IndexSnapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diagnostics::Warning;
use crate::embedding::ChunkEmbedding;
use crate::error::{Error, Result};
use crate::segmenter::Chunk;
use crate::text::LexicalTokenizer;

/// Identifies a chunk: `(doc_id, chunk_index)`. Orders by doc id, then index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkKey {
    pub doc_id: String,
    pub chunk_index: usize,
}

impl ChunkKey {
    pub fn new(doc_id: impl Into<String>, chunk_index: usize) -> Self {
        ChunkKey {
            doc_id: doc_id.into(),
            chunk_index,
        }
    }
}

impl fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.chunk_index)
    }
}

/// Descending score, ties by ascending key. Used by every ranked output.
/// `-0.0` and `0.0` compare equal.
pub fn by_score_then_key<K: Ord>(a: &(K, f64), b: &(K, f64)) -> Ordering {
    (b.1 + 0.0)
        .total_cmp(&(a.1 + 0.0))
        .then_with(|| a.0.cmp(&b.0))
}

/// A chunk as indexed: its dense vector and its lexical terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub key: ChunkKey,
    pub dense: ChunkEmbedding,
    /// Terms of the indexed text (context + separator + chunk text when a
    /// context is present), in order, repeats kept.
    pub terms: Vec<String>,
}

impl ChunkRecord {
    pub fn new(chunk: &Chunk, dense: ChunkEmbedding, tokenizer: &LexicalTokenizer) -> Self {
        ChunkRecord {
            key: ChunkKey::new(chunk.span.doc_id.clone(), chunk.span.index),
            dense,
            terms: tokenizer.tokenize(&chunk.indexed_text()),
        }
    }

    pub fn indexed_text_len(&self) -> usize {
        self.terms.len()
    }
}

#[derive(Debug, Clone)]
pub struct Indexes {
    pub bm25: Bm25Index,
    pub dense: DenseIndex,
    pub warnings: Vec<Warning>,
}

/// Builds both indexes over the same records. Zero-sentinel vectors stay in
/// the BM25 index but are left out of the dense one.
pub fn build_indexes(
    records: &[ChunkRecord],
    params: Bm25Params,
    tokenizer: LexicalTokenizer,
) -> Result<Indexes> {
    params.validate()?;
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(&r.key) {
            return Err(Error::Validation(format!("duplicate chunk key {}", r.key)));
        }
    }

    let mut bm25 = Bm25Index::new(params, tokenizer);
    let dim = records
        .iter()
        .map(|r| r.dense.vector.len())
        .max()
        .unwrap_or(0);
    let mut dense = DenseIndex::new(dim);
    let mut warnings = Vec::new();
    for r in records {
        bm25.add(r.key.clone(), &r.terms);
        if r.dense.sentinel {
            warnings.push(Warning::ExcludedFromDense {
                doc_id: r.key.doc_id.clone(),
                chunk_index: r.key.chunk_index,
            });
        } else {
            dense.add(r.key.clone(), &r.dense.vector)?;
        }
    }
    Ok(Indexes {
        bm25,
        dense,
        warnings,
    })
}
