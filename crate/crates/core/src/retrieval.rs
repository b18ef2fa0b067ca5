//! Traditional dense retrieval (TR), weighted rank fusion with reranking
//! (RFR), and max-chunk aggregation from chunk to document rankings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ProviderError, Result};
use crate::index::{by_score_then_key, dense_search, Bm25Index, ChunkKey, DenseIndex};
use crate::retry::RetryPolicy;
use crate::text::LexicalTokenizer;

/// Scored items in non-increasing score order with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList<K> {
    items: Vec<(K, f64)>,
}

pub type ChunkRanking = RankedList<ChunkKey>;
pub type DocRanking = RankedList<String>;

impl<K: Ord + Clone> RankedList<K> {
    /// Sorts by descending score, ties by ascending id. Later duplicates of
    /// an id are dropped.
    pub fn sorted(mut items: Vec<(K, f64)>) -> Self {
        items.sort_by(by_score_then_key);
        let mut seen = BTreeSet::new();
        items.retain(|(k, _)| seen.insert(k.clone()));
        RankedList { items }
    }

    /// Wraps items that are already ranked.
    ///
    /// # Panics
    /// If scores increase anywhere or an id repeats.
    pub fn from_ranked(items: Vec<(K, f64)>) -> Self {
        assert!(
            items.windows(2).all(|w| w[0].1 >= w[1].1),
            "ranked list scores must be non-increasing"
        );
        let unique: BTreeSet<&K> = items.iter().map(|(k, _)| k).collect();
        assert_eq!(unique.len(), items.len(), "ranked list ids must be unique");
        RankedList { items }
    }
}

impl<K> RankedList<K> {
    pub fn empty() -> Self {
        RankedList { items: Vec::new() }
    }

    pub fn items(&self) -> &[(K, f64)] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = &K> {
        self.items.iter().map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.items.truncate(n);
    }

    pub fn into_items(self) -> Vec<(K, f64)> {
        self.items
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-list min-max scaling to [0, 1]; a constant list maps to 1.
    #[default]
    MinMax,
    /// Raw scores.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub dense_weight: f64,
    pub sparse_weight: f64,
    pub candidate_depth: usize,
    pub normalization: Normalization,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dense_weight: 1.0,
            sparse_weight: 0.25,
            candidate_depth: 50,
            normalization: Normalization::MinMax,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.dense_weight) || !ok(self.sparse_weight) {
            return Err(Error::Config(
                "fusion weights must be finite and >= 0".into(),
            ));
        }
        if self.dense_weight == 0.0 && self.sparse_weight == 0.0 {
            return Err(Error::Config("fusion weights cannot both be zero".into()));
        }
        if self.candidate_depth == 0 {
            return Err(Error::Config("candidate_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// TR: dense search wrapped as a chunk ranking.
pub fn retrieve_traditional(
    index: &DenseIndex,
    query_vector: &[f32],
    depth: usize,
) -> Result<ChunkRanking> {
    Ok(RankedList::from_ranked(dense_search(
        index,
        query_vector,
        depth,
    )?))
}

/// BM25 side of RFR, truncated to `depth`.
pub fn retrieve_sparse(index: &Bm25Index, query_text: &str, depth: usize) -> ChunkRanking {
    let mut hits = index.search_text(query_text);
    hits.truncate(depth);
    RankedList::from_ranked(hits)
}

fn normalized<K: Clone + Eq + Hash>(list: &RankedList<K>, how: Normalization) -> HashMap<K, f64> {
    let (lo, hi) = list
        .items
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, s)| {
            (lo.min(*s), hi.max(*s))
        });
    list.items
        .iter()
        .map(|(k, s)| {
            let v = match how {
                Normalization::None => *s,
                Normalization::MinMax if hi > lo => (s - lo) / (hi - lo),
                Normalization::MinMax => 1.0,
            };
            (k.clone(), v)
        })
        .collect()
}

/// Weighted score fusion of a dense and a sparse ranking.
///
/// Each list is normalized on its own; a candidate missing from a list gets
/// 0 from it. The fused score is `dense_weight·dense + sparse_weight·sparse`,
/// ranked descending with ties by key and cut to `candidate_depth`.
pub fn fuse(dense: &ChunkRanking, sparse: &ChunkRanking, cfg: &FusionConfig) -> ChunkRanking {
    let d = normalized(dense, cfg.normalization);
    let s = normalized(sparse, cfg.normalization);
    let candidates: BTreeSet<&ChunkKey> = dense.ids().chain(sparse.ids()).collect();
    let fused: Vec<(ChunkKey, f64)> = candidates
        .into_iter()
        .map(|k| {
            let score = cfg.dense_weight * d.get(k).copied().unwrap_or(0.0)
                + cfg.sparse_weight * s.get(k).copied().unwrap_or(0.0);
            (k.clone(), score)
        })
        .collect();
    let mut out = RankedList::sorted(fused);
    out.truncate(cfg.candidate_depth);
    out
}

/// A cross-encoder style scorer of (query, passage) pairs.
pub trait RerankProvider: Send + Sync {
    fn name(&self) -> &str;

    /// One score per passage, in input order; higher is more relevant.
    fn score(&self, query: &str, passages: &[&str])
        -> std::result::Result<Vec<f64>, ProviderError>;
}

/// Deterministic reranker: the fraction of distinct query terms that occur
/// in the passage.
#[derive(Debug, Clone, Default)]
pub struct MockOverlapReranker {
    pub tokenizer: LexicalTokenizer,
}

impl MockOverlapReranker {
    pub fn overlap(&self, query: &str, passage: &str) -> f64 {
        let q: BTreeSet<String> = self.tokenizer.tokenize(query).into_iter().collect();
        if q.is_empty() {
            return 0.0;
        }
        let p: BTreeSet<String> = self.tokenizer.tokenize(passage).into_iter().collect();
        q.intersection(&p).count() as f64 / q.len() as f64
    }
}

impl RerankProvider for MockOverlapReranker {
    fn name(&self) -> &str {
        "mock-overlap-reranker"
    }

    fn score(
        &self,
        query: &str,
        passages: &[&str],
    ) -> std::result::Result<Vec<f64>, ProviderError> {
        Ok(passages.iter().map(|p| self.overlap(query, p)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankCandidate {
    pub key: ChunkKey,
    /// What the reranker reads: context + separator + chunk text when
    /// contextualized.
    pub text: String,
    /// First-stage score, kept for the fallback ordering.
    pub prior_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankRequest {
    pub query_text: String,
    /// In first-stage rank order.
    pub candidates: Vec<RerankCandidate>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub ranking: ChunkRanking,
    /// Why the provider's scores could not be used, if they could not.
    pub degraded: Option<String>,
}

/// Rescores every candidate with the provider and reorders by the new score
/// (stable, so equal scores keep first-stage order). On provider failure the
/// first-stage order is returned and `degraded` is set.
pub fn rerank(
    provider: &dyn RerankProvider,
    req: &RerankRequest,
    retry: RetryPolicy,
) -> Result<Reranked> {
    if req.candidates.is_empty() {
        return Err(Error::Argument(
            "rerank needs at least one candidate".into(),
        ));
    }
    let passages: Vec<&str> = req.candidates.iter().map(|c| c.text.as_str()).collect();
    let scored = retry
        .run(|| provider.score(&req.query_text, &passages))
        .and_then(|scores| {
            if scores.len() != passages.len() {
                return Err(ProviderError::Protocol {
                    provider: provider.name().to_string(),
                    message: format!("{} scores for {} passages", scores.len(), passages.len()),
                });
            }
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(ProviderError::Protocol {
                    provider: provider.name().to_string(),
                    message: "non-finite score".into(),
                });
            }
            Ok(scores)
        });

    let (mut items, degraded): (Vec<(ChunkKey, f64)>, _) = match scored {
        Ok(scores) => (
            req.candidates
                .iter()
                .zip(scores)
                .map(|(c, s)| (c.key.clone(), s))
                .collect(),
            None,
        ),
        Err(e) => (
            req.candidates
                .iter()
                .map(|c| (c.key.clone(), c.prior_score))
                .collect(),
            Some(e.to_string()),
        ),
    };
    items.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)));
    items.truncate(req.depth);
    Ok(Reranked {
        ranking: RankedList::from_ranked(items),
        degraded,
    })
}

/// Max-chunk aggregation: a document scores as its best chunk. Documents are
/// ranked descending, ties by id, and cut to `top_k`.
pub fn aggregate_to_documents(chunks: &ChunkRanking, top_k: usize) -> DocRanking {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for (key, score) in chunks.items() {
        best.entry(key.doc_id.as_str())
            .and_modify(|s| *s = s.max(*score))
            .or_insert(*score);
    }
    let mut out = RankedList::sorted(best.into_iter().map(|(d, s)| (d.to_string(), s)).collect());
    out.truncate(top_k);
    out
}
