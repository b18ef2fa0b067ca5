//! Brute-force reference implementations used as test oracles.
//!
//! Everything here is written from the formulas, without calling the
//! library's scoring code. Only inputs (segmentation, token matrices,
//! tokenization, mock contexts) come from the library.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use rechunk::contextualizer::mock_context;
use rechunk::segmenter::{segment, slice_chunks};
use rechunk::{
    ChunkKey, ChunkingMode, Dataset, DatasetPaths, ExperimentConfig, LexicalTokenizer,
    RetrievalMethod, TestEmbedder, TestEmbedderConfig, TokenEmbeddingMatrix,
};

pub fn mini_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini")
}

pub fn mini_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetPaths::beir(mini_dir(), "test"),
        ..Default::default()
    }
}

pub fn mini_dataset() -> Dataset {
    Dataset::load(&mini_config().dataset).expect("mini corpus loads")
}

/// Descending score, ties by ascending key; `-0.0 == 0.0`.
pub fn rank<K: Ord>(mut v: Vec<(K, f64)>) -> Vec<(K, f64)> {
    v.sort_by(|a, b| match b.1.partial_cmp(&a.1).expect("finite scores") {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    v
}

pub fn bm25(
    docs: &[(ChunkKey, Vec<String>)],
    query: &[String],
    k1: f64,
    b: f64,
) -> Vec<(ChunkKey, f64)> {
    if docs.is_empty() {
        return Vec::new();
    }
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|(_, t)| t.len() as f64).sum::<f64>() / n;
    let mut terms: Vec<&String> = Vec::new();
    for t in query {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    let mut out = Vec::new();
    for (key, doc) in docs {
        let len = doc.len() as f64;
        let mut score = 0.0;
        let mut matched = false;
        for &t in &terms {
            let tf = doc.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let df = docs.iter().filter(|(_, d)| d.contains(t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = if avgdl > 0.0 {
                1.0 - b + b * len / avgdl
            } else {
                1.0
            };
            score += idf * (tf * (k1 + 1.0)) / (tf + k1 * norm);
        }
        if matched {
            out.push((key.clone(), score));
        }
    }
    rank(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Exhaustive argsort of inner products.
pub fn dense(rows: &[(ChunkKey, Vec<f32>)], query: &[f32], depth: usize) -> Vec<(ChunkKey, f64)> {
    let mut all = rank(
        rows.iter()
            .map(|(k, v)| (k.clone(), dot(v, query)))
            .collect(),
    );
    all.truncate(depth);
    all
}

fn minmax<K: Clone + Eq + std::hash::Hash>(list: &[(K, f64)]) -> HashMap<K, f64> {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for (_, s) in list {
        lo = lo.min(*s);
        hi = hi.max(*s);
    }
    list.iter()
        .map(|(k, s)| (k.clone(), if hi > lo { (s - lo) / (hi - lo) } else { 1.0 }))
        .collect()
}

pub fn fuse(
    dense: &[(ChunkKey, f64)],
    sparse: &[(ChunkKey, f64)],
    wd: f64,
    ws: f64,
    depth: usize,
) -> Vec<(ChunkKey, f64)> {
    let d = minmax(dense);
    let s = minmax(sparse);
    let mut keys: Vec<ChunkKey> = d.keys().chain(s.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    let mut out = rank(
        keys.into_iter()
            .map(|k| {
                let v =
                    wd * d.get(&k).copied().unwrap_or(0.0) + ws * s.get(&k).copied().unwrap_or(0.0);
                (k, v)
            })
            .collect(),
    );
    out.truncate(depth);
    out
}

pub fn overlap(tokenizer: &LexicalTokenizer, query: &str, passage: &str) -> f64 {
    let q: HashSet<String> = tokenizer.tokenize(query).into_iter().collect();
    let p: HashSet<String> = tokenizer.tokenize(passage).into_iter().collect();
    if q.is_empty() {
        return 0.0;
    }
    q.iter().filter(|t| p.contains(*t)).count() as f64 / q.len() as f64
}

/// Insertion sort by descending score, keeping input order among equals.
pub fn stable_rerank(candidates: &[(ChunkKey, f64)], new_scores: &[f64]) -> Vec<(ChunkKey, f64)> {
    let mut out: Vec<(ChunkKey, f64)> = Vec::new();
    for ((k, _), &s) in candidates.iter().zip(new_scores) {
        let pos = out.iter().position(|(_, t)| *t < s).unwrap_or(out.len());
        out.insert(pos, (k.clone(), s));
    }
    out
}

pub fn aggregate(chunks: &[(ChunkKey, f64)], top_k: usize) -> Vec<String> {
    let mut best: HashMap<String, f64> = HashMap::new();
    for (k, s) in chunks {
        let e = best.entry(k.doc_id.clone()).or_insert(f64::MIN);
        if *s > *e {
            *e = *s;
        }
    }
    let ranked = rank(best.into_iter().collect());
    ranked.into_iter().take(top_k).map(|(d, _)| d).collect()
}

pub fn ndcg(ranking: &[String], grades: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, d) in ranking.iter().enumerate().take(k) {
        let g = grades.get(d).copied().unwrap_or(0) as f64;
        dcg += g / ((i + 1) as f64 + 1.0).log2();
    }
    let mut ideal: Vec<u32> = grades.values().copied().filter(|g| *g > 0).collect();
    ideal.sort();
    ideal.reverse();
    let mut idcg = 0.0;
    for (i, g) in ideal.iter().enumerate().take(k) {
        idcg += *g as f64 / ((i + 1) as f64 + 1.0).log2();
    }
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

fn is_rel(grades: &BTreeMap<String, u32>, d: &str, threshold: u32) -> bool {
    grades.get(d).is_some_and(|g| *g >= threshold)
}

pub fn average_precision(
    ranking: &[String],
    grades: &BTreeMap<String, u32>,
    k: usize,
    threshold: u32,
) -> f64 {
    let r = grades.values().filter(|g| **g >= threshold).count();
    if r == 0 {
        return 0.0;
    }
    let top: Vec<&String> = ranking.iter().take(k).collect();
    let mut total = 0.0;
    for i in 0..top.len() {
        if is_rel(grades, top[i], threshold) {
            let hits = top[..=i]
                .iter()
                .filter(|d| is_rel(grades, d, threshold))
                .count();
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / r.min(k) as f64
}

pub fn f1(ranking: &[String], grades: &BTreeMap<String, u32>, k: usize, threshold: u32) -> f64 {
    let r = grades.values().filter(|g| **g >= threshold).count();
    let h = ranking
        .iter()
        .take(k)
        .filter(|d| is_rel(grades, d, threshold))
        .count();
    if r == 0 || h == 0 {
        return 0.0;
    }
    let p = h as f64 / k as f64;
    let rc = h as f64 / r as f64;
    2.0 * p * rc / (p + rc)
}

/// Mean pooling and unit normalization, from the definitions.
pub fn pool(matrix: &TokenEmbeddingMatrix, rows: &[usize]) -> (Vec<f32>, bool) {
    let dim = matrix.dim;
    let mut sum = vec![0.0f64; dim];
    for &r in rows {
        for (acc, x) in sum.iter_mut().zip(&matrix.vectors[r * dim..(r + 1) * dim]) {
            *acc += *x as f64;
        }
    }
    if !rows.is_empty() {
        for x in sum.iter_mut() {
            *x /= rows.len() as f64;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (vec![0.0; dim], true);
    }
    (sum.iter().map(|x| (x / norm) as f32).collect(), false)
}

/// Rows whose token starts inside `[start, end)`.
pub fn rows_in(matrix: &TokenEmbeddingMatrix, start: usize, end: usize) -> Vec<usize> {
    (0..matrix.tokens.len())
        .filter(|&i| matrix.tokens[i].0 >= start && matrix.tokens[i].0 < end)
        .collect()
}

pub struct OracleChunk {
    pub key: ChunkKey,
    pub indexed_text: String,
    pub vector: Vec<f32>,
    pub sentinel: bool,
}

/// Chunks of the whole corpus with their embeddings, computed by brute force.
pub fn oracle_chunks(dataset: &Dataset, cfg: &ExperimentConfig) -> Vec<OracleChunk> {
    let embedder = TestEmbedder::new(cfg.providers.test_embedder).unwrap();
    let mut out = Vec::new();
    for doc in &dataset.documents {
        let spans = segment(doc, &cfg.segmenter).unwrap();
        let chunks = slice_chunks(doc, &spans).unwrap();
        let doc_matrix = embedder.embed_text(&doc.text);
        for c in chunks {
            let indexed_text = if cfg.contextualize {
                format!("{}\n\n{}", mock_context(doc).trim(), c.text)
            } else {
                c.text.clone()
            };
            let (vector, sentinel) = match cfg.chunking_mode {
                ChunkingMode::Early => {
                    let m = embedder.embed_text(&indexed_text);
                    let all: Vec<usize> = (0..m.tokens.len()).collect();
                    pool(&m, &all)
                }
                ChunkingMode::Late => {
                    pool(&doc_matrix, &rows_in(&doc_matrix, c.span.start, c.span.end))
                }
            };
            out.push(OracleChunk {
                key: ChunkKey::new(doc.id.clone(), c.span.index),
                indexed_text,
                vector,
                sentinel,
            });
        }
    }
    out
}

/// Metric means for one configuration over the whole pipeline, computed by
/// brute force.
pub fn oracle_metrics(dataset: &Dataset, cfg: &ExperimentConfig) -> BTreeMap<String, f64> {
    let embedder = TestEmbedder::new(cfg.providers.test_embedder).unwrap();
    let tokenizer = cfg.tokenizer;
    let chunks = oracle_chunks(dataset, cfg);
    let rows: Vec<(ChunkKey, Vec<f32>)> = chunks
        .iter()
        .filter(|c| !c.sentinel)
        .map(|c| (c.key.clone(), c.vector.clone()))
        .collect();
    let terms: Vec<(ChunkKey, Vec<String>)> = chunks
        .iter()
        .map(|c| (c.key.clone(), tokenizer.tokenize(&c.indexed_text)))
        .collect();
    let texts: HashMap<ChunkKey, &str> = chunks
        .iter()
        .map(|c| (c.key.clone(), c.indexed_text.as_str()))
        .collect();
    let depth = cfg.fusion.candidate_depth;
    let top_k = *cfg.cutoffs.ks().iter().max().unwrap();

    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut evaluated = 0usize;
    for q in &dataset.queries {
        let grades: BTreeMap<String, u32> =
            dataset.qrels.for_query(&q.id).cloned().unwrap_or_default();
        if !grades
            .values()
            .any(|g| *g >= cfg.relevance_threshold.max(1))
        {
            continue;
        }
        let m = embedder.embed_text(&q.text);
        let all: Vec<usize> = (0..m.tokens.len()).collect();
        let (qv, _) = pool(&m, &all);
        let d = dense(&rows, &qv, depth);
        let ranked_chunks = match cfg.retrieval_method {
            RetrievalMethod::Traditional => d,
            RetrievalMethod::RankFusionRerank => {
                let mut s = bm25(
                    &terms,
                    &tokenizer.tokenize(&q.text),
                    cfg.bm25.k1,
                    cfg.bm25.b,
                );
                s.truncate(depth);
                let fused = fuse(
                    &d,
                    &s,
                    cfg.fusion.dense_weight,
                    cfg.fusion.sparse_weight,
                    depth,
                );
                let scores: Vec<f64> = fused
                    .iter()
                    .map(|(k, _)| overlap(&tokenizer, &q.text, texts[k]))
                    .collect();
                stable_rerank(&fused, &scores)
            }
        };
        let docs = aggregate(&ranked_chunks, top_k);
        evaluated += 1;
        for &k in cfg.cutoffs.ks() {
            let t = cfg.relevance_threshold;
            *sums.entry(format!("ndcg@{k}")).or_default() += ndcg(&docs, &grades, k);
            *sums.entry(format!("map@{k}")).or_default() += average_precision(&docs, &grades, k, t);
            *sums.entry(format!("f1@{k}")).or_default() += f1(&docs, &grades, k, t);
        }
    }
    sums.into_iter()
        .map(|(k, v)| (k, v / evaluated as f64))
        .collect()
}

/// The test embedder configuration with a different mixing weight.
pub fn with_alpha(cfg: &ExperimentConfig, alpha: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.providers.test_embedder = TestEmbedderConfig {
        alpha,
        ..c.providers.test_embedder
    };
    c
}

/// Seeded random instances shared by the oracle tests and the acceptance run.
pub mod gen {
    use std::collections::BTreeMap;

    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rechunk::ChunkKey;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub struct Bm25Case {
        pub docs: Vec<(ChunkKey, Vec<String>)>,
        pub query: Vec<String>,
    }

    /// Up to 20 records over a vocabulary of up to 30 terms.
    pub fn bm25_case(rng: &mut ChaCha8Rng) -> Bm25Case {
        let vocab: Vec<String> = (0..rng.random_range(1..=30))
            .map(|i| format!("t{i}"))
            .collect();
        let n = rng.random_range(1..=20);
        let docs = (0..n)
            .map(|i| {
                let len = rng.random_range(1..=15);
                let terms = (0..len)
                    .map(|_| vocab.choose(rng).unwrap().clone())
                    .collect();
                (
                    ChunkKey::new(format!("d{:02}", rng.random_range(0..n)), i),
                    terms,
                )
            })
            .collect();
        let qlen = rng.random_range(1..=5);
        let query = (0..qlen)
            .map(|_| vocab.choose(rng).unwrap().clone())
            .collect();
        Bm25Case { docs, query }
    }

    pub struct DenseCase {
        pub rows: Vec<(ChunkKey, Vec<f32>)>,
        pub query: Vec<f32>,
        pub depth: usize,
    }

    /// Coarse components so that exact score ties are common.
    pub fn dense_case(rng: &mut ChaCha8Rng) -> DenseCase {
        const VALUES: [f32; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let dim = rng.random_range(1..=8);
        let n = rng.random_range(1..=40);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..dim).map(|_| *VALUES.choose(rng).unwrap()).collect()
        };
        let rows = (0..n)
            .map(|i| {
                (
                    ChunkKey::new(format!("d{}", rng.random_range(0..10)), i),
                    draw(rng),
                )
            })
            .collect();
        let query = draw(rng);
        let depth = rng.random_range(1..=n + 3);
        DenseCase { rows, query, depth }
    }

    pub struct MetricCase {
        pub ranking: Vec<String>,
        pub grades: BTreeMap<String, u32>,
    }

    /// A ranking over up to 15 of 20 documents and graded judgments for a
    /// random subset of them (possibly including unretrieved ones).
    pub fn metric_case(rng: &mut ChaCha8Rng) -> MetricCase {
        let pool: Vec<String> = (0..20).map(|i| format!("d{i:02}")).collect();
        let len = rng.random_range(0..=15);
        let ranking = pool.choose_multiple(rng, len).cloned().collect();
        let judged = rng.random_range(0..=8);
        let grades = pool
            .choose_multiple(rng, judged)
            .map(|d| (d.clone(), rng.random_range(0..=3)))
            .collect();
        MetricCase { ranking, grades }
    }

    /// Candidates that carry both a dense and a sparse score.
    pub fn candidate_set(rng: &mut ChaCha8Rng) -> Vec<(ChunkKey, f64, f64)> {
        let n = rng.random_range(1..=25);
        (0..n)
            .map(|i| {
                (
                    ChunkKey::new(format!("d{}", rng.random_range(0..8)), i),
                    f64::from(rng.random_range(0..6u8)) / 5.0,
                    f64::from(rng.random_range(0..12u8)) * 0.75,
                )
            })
            .collect()
    }
}
