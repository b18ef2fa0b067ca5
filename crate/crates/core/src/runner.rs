//! Experiment orchestration: segment, contextualize, embed, index, retrieve,
//! aggregate and evaluate, with caches shared across grid cells.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{
    ChunkingMode, ExperimentConfig, ProviderConfig, ProviderKind, RetrievalMethod,
};
use crate::contextualizer::{ContextualizeOptions, Contextualizer, LlmProvider, MockLlm};
use crate::corpus::{subset_corpus, Dataset, Document, Query, SubsetMode};
use crate::diagnostics::Warning;
use crate::embedding::{
    embed_tokens, embed_tokens_batch, mean_pool, pool_late, to_chunk_embedding, CacheKey,
    ChunkEmbedding, EmbeddingCache, EmbeddingProvider, TestEmbedder, TestEmbedderConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, MetricsReport};
use crate::index::{build_indexes, Bm25Index, ChunkKey, ChunkRecord, DenseIndex, IndexSnapshot};
use crate::retrieval::{
    aggregate_to_documents, fuse, rerank, retrieve_sparse, retrieve_traditional, ChunkRanking,
    DocRanking, MockOverlapReranker, RankedList, RerankCandidate, RerankProvider, RerankRequest,
};
use crate::retry::RetryPolicy;
use crate::segmenter::{segment, slice_chunks, Chunk};
use crate::sidecar::SidecarClient;
use crate::text::LexicalTokenizer;

const EMBED_BATCH: usize = 16;

/// The three model roles a run needs.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub llm: Arc<dyn LlmProvider>,
    pub reranker: Arc<dyn RerankProvider>,
    /// Retry policy applied by the pipeline around provider calls.
    pub retry: RetryPolicy,
}

impl Providers {
    /// Test embedder, mock LLM and lexical-overlap reranker.
    pub fn mock(embedder: TestEmbedderConfig, tokenizer: LexicalTokenizer) -> Result<Self> {
        Ok(Providers {
            embedder: Arc::new(TestEmbedder::new(embedder)?),
            llm: Arc::new(MockLlm),
            reranker: Arc::new(MockOverlapReranker { tokenizer }),
            retry: RetryPolicy::default(),
        })
    }

    /// Builds the providers a config asks for. Sidecar providers are
    /// contacted here, so an unreachable service fails before any compute.
    pub fn from_config(cfg: &ProviderConfig, tokenizer: LexicalTokenizer) -> Result<Self> {
        match cfg.kind {
            ProviderKind::Mock => Self::mock(cfg.test_embedder, tokenizer),
            ProviderKind::Sidecar => {
                let endpoint = cfg
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::Config("sidecar providers need an endpoint".into()))?;
                let client = Arc::new(SidecarClient::connect(
                    endpoint,
                    Duration::from_secs(cfg.timeout_secs),
                    RetryPolicy::default(),
                )?);
                Ok(Providers {
                    embedder: client.clone(),
                    llm: client.clone(),
                    reranker: client,
                    retry: RetryPolicy::NONE,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderVersions {
    pub embedder: String,
    pub llm: Option<String>,
    pub reranker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProvenance {
    pub corpus_hash: String,
    pub documents_total: usize,
    pub documents_used: usize,
    pub subset_fraction: f64,
    pub subset_seed: u64,
    pub subset_mode: SubsetMode,
    pub queries: usize,
    pub judgments: usize,
}

/// Wall-clock seconds per pipeline stage. Stages served from a cache
/// report (close to) zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub segment: f64,
    pub contextualize: f64,
    pub embed: f64,
    pub index: f64,
    pub retrieve: f64,
    pub evaluate: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub embedding_hits: usize,
    pub embedding_misses: usize,
    pub context_hits: usize,
    pub context_misses: usize,
    pub index_snapshot_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub model: String,
    pub chunking: String,
    pub retrieval: String,
    pub chunking_mode: ChunkingMode,
    pub providers: ProviderVersions,
    pub corpus: CorpusProvenance,
    pub chunk_count: usize,
    pub timings: StageTimings,
    pub cache: CacheStats,
    pub warnings: Vec<Warning>,
    pub degraded: bool,
}

impl RunManifest {
    /// Copy with timings and cache counters zeroed, for comparing runs.
    pub fn without_volatile(&self) -> RunManifest {
        RunManifest {
            timings: StageTimings::default(),
            cache: CacheStats::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub manifest: RunManifest,
    pub rankings: BTreeMap<String, DocRanking>,
}

/// Segmented, contextualized, embedded and indexed corpus for one
/// (strategy, contextualize, chunking mode) combination.
pub struct Prepared {
    pub chunks: Vec<Chunk>,
    pub bm25: Bm25Index,
    pub dense: DenseIndex,
    pub warnings: Vec<Warning>,
    texts: HashMap<ChunkKey, String>,
}

impl Prepared {
    pub fn indexed_text(&self, key: &ChunkKey) -> Option<&str> {
        self.texts.get(key).map(String::as_str)
    }

    pub fn snapshot(&self) -> IndexSnapshot {
        IndexSnapshot {
            bm25: self.bm25.clone(),
            dense: self.dense.clone(),
        }
    }
}

#[derive(Debug, Default)]
struct ContextCache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, String>,
    pending: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ContextLine {
    key: String,
    context: String,
}

impl ContextCache {
    fn open(path: Option<PathBuf>) -> Result<Self> {
        let mut cache = ContextCache {
            path,
            ..Default::default()
        };
        if let Some(p) = cache.path.as_ref().filter(|p| p.exists()) {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ContextLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: p.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                cache.entries.insert(rec.key, rec.context);
            }
        }
        Ok(cache)
    }

    fn insert(&mut self, key: String, context: String) {
        if self.entries.insert(key.clone(), context).is_none() {
            self.pending.push(key);
        }
    }

    fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            self.pending.clear();
            return Ok(());
        };
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = String::new();
        for key in self.pending.drain(..) {
            let line = ContextLine {
                context: self.entries[&key].clone(),
                key,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

struct PrepareStats {
    timings: StageTimings,
    cache: CacheStats,
}

/// A loaded dataset plus providers and caches, shared by the cells of a
/// grid.
pub struct Session {
    base: ExperimentConfig,
    providers: Providers,
    dataset: Dataset,
    provenance: CorpusProvenance,
    cache_dir: Option<PathBuf>,
    embeddings: Mutex<EmbeddingCache>,
    embeddings_path: Option<PathBuf>,
    contexts: Mutex<ContextCache>,
    prepared: Mutex<HashMap<String, Arc<Prepared>>>,
    embed_pool: rayon::ThreadPool,
}

fn corpus_hash(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        for part in [&d.id, &d.title, &d.text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn short_hash(parts: &[&[u8]]) -> String {
    hex::encode(&EmbeddingCache::key(parts)[..8])
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn same_dataset(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.dataset == b.dataset
        && a.subset == b.subset
        && a.query_limit == b.query_limit
        && a.cache_dir == b.cache_dir
        && a.providers == b.providers
}

impl Session {
    /// Loads and subsets the dataset named by `cfg` and opens its caches.
    pub fn open(cfg: &ExperimentConfig, providers: Providers) -> Result<Self> {
        cfg.validate()?;
        let mut dataset = Dataset::load(&cfg.dataset)?;
        let documents_total = dataset.documents.len();
        let (documents, qrels) = subset_corpus(&dataset.documents, &dataset.qrels, &cfg.subset)?;
        dataset.documents = documents;
        dataset.qrels = qrels;
        if let Some(limit) = cfg.query_limit {
            dataset.queries.truncate(limit);
        }
        Self::with_dataset(cfg, providers, dataset, documents_total)
    }

    /// Uses an already-loaded dataset as is (no subsetting).
    pub fn from_dataset(
        cfg: &ExperimentConfig,
        providers: Providers,
        dataset: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        let total = dataset.documents.len();
        Self::with_dataset(cfg, providers, dataset, total)
    }

    fn with_dataset(
        cfg: &ExperimentConfig,
        providers: Providers,
        dataset: Dataset,
        documents_total: usize,
    ) -> Result<Self> {
        let provenance = CorpusProvenance {
            corpus_hash: corpus_hash(&dataset.documents),
            documents_total,
            documents_used: dataset.documents.len(),
            subset_fraction: cfg.subset.fraction,
            subset_seed: cfg.subset.seed,
            subset_mode: cfg.subset.mode,
            queries: dataset.queries.len(),
            judgments: dataset.qrels.len(),
        };

        let info = providers.embedder.info().clone();
        let cache_dir = cfg.cache_dir.clone();
        if let Some(dir) = &cache_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let embeddings_path = cache_dir.as_ref().map(|d| {
            d.join(format!(
                "embeddings-{}.bin",
                short_hash(&[info.name.as_bytes()])
            ))
        });
        let embeddings = match &embeddings_path {
            Some(p) => EmbeddingCache::load_or_new(p, info.dim)?,
            None => EmbeddingCache::new(info.dim),
        };
        let contexts = ContextCache::open(cache_dir.as_ref().map(|d| d.join("contexts.jsonl")))?;

        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let embed_pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cores.min(info.max_concurrency).max(1))
            .thread_name(|i| format!("embed-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot start embedding pool: {e}")))?;

        Ok(Session {
            base: cfg.clone(),
            providers,
            dataset,
            provenance,
            cache_dir,
            embeddings: Mutex::new(embeddings),
            embeddings_path,
            contexts: Mutex::new(contexts),
            prepared: Mutex::new(HashMap::new()),
            embed_pool,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn provenance(&self) -> &CorpusProvenance {
        &self.provenance
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    /// Writes dirty caches to the cache directory, if one is configured.
    pub fn flush(&self) -> Result<()> {
        if let Some(path) = &self.embeddings_path {
            let mut cache = self.embeddings.lock().expect("cache lock");
            if cache.is_dirty() {
                cache.save(path)?;
            }
        }
        self.contexts.lock().expect("cache lock").flush()
    }

    fn check_cell(&self, cfg: &ExperimentConfig) -> Result<()> {
        cfg.validate()?;
        if !same_dataset(&self.base, cfg) {
            return Err(Error::Config(
                "grid cells must share dataset, subset, query limit, cache and providers".into(),
            ));
        }
        Ok(())
    }

    fn index_key(&self, cfg: &ExperimentConfig) -> String {
        let mut parts = vec![
            self.provenance.corpus_hash.clone(),
            self.providers.embedder.info().name.clone(),
            json(&cfg.chunking_mode),
            json(&cfg.segmenter),
            json(&cfg.tokenizer),
            json(&cfg.bm25),
            cfg.contextualize.to_string(),
        ];
        if cfg.contextualize {
            parts.push(self.providers.llm.name().to_string());
            parts.push(json(&cfg.prompt));
        }
        let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
        hex::encode(EmbeddingCache::key(&refs))
    }

    /// Runs (or reuses) everything up to and including indexing.
    pub fn prepare(&self, cfg: &ExperimentConfig) -> Result<Arc<Prepared>> {
        self.check_cell(cfg)?;
        Ok(self.prepare_inner(cfg)?.0)
    }

    fn prepare_inner(&self, cfg: &ExperimentConfig) -> Result<(Arc<Prepared>, PrepareStats)> {
        let key = self.index_key(cfg);
        let mut stats = PrepareStats {
            timings: StageTimings::default(),
            cache: CacheStats::default(),
        };
        if let Some(p) = self.prepared.lock().expect("prepared lock").get(&key) {
            stats.cache.index_snapshot_hit = true;
            return Ok((p.clone(), stats));
        }

        let t = Instant::now();
        let mut chunks = Vec::new();
        let mut per_doc = Vec::with_capacity(self.dataset.documents.len());
        for doc in &self.dataset.documents {
            let spans = segment(doc, &cfg.segmenter)?;
            let doc_chunks = slice_chunks(doc, &spans)?;
            per_doc.push(doc_chunks.len());
            chunks.extend(doc_chunks);
        }
        stats.timings.segment = t.elapsed().as_secs_f64();

        let mut warnings = Vec::new();
        if cfg.contextualize {
            let t = Instant::now();
            let (hits, misses) =
                self.contextualize_all(cfg, &mut chunks, &per_doc, &mut warnings)?;
            stats.cache.context_hits = hits;
            stats.cache.context_misses = misses;
            stats.timings.contextualize = t.elapsed().as_secs_f64();
        }
        let texts: HashMap<ChunkKey, String> = chunks
            .iter()
            .map(|c| {
                (
                    ChunkKey::new(c.span.doc_id.clone(), c.span.index),
                    c.indexed_text(),
                )
            })
            .collect();

        let snapshot_paths = self.cache_dir.as_ref().map(|d| {
            let stem = format!("index-{}", &key[..16]);
            (
                d.join(format!("{stem}.bin")),
                d.join(format!("{stem}.warnings.json")),
            )
        });
        if let Some((bin, warn)) = &snapshot_paths {
            if bin.exists() && warn.exists() {
                let t = Instant::now();
                let snap = IndexSnapshot::load(bin)?;
                let raw = fs::read_to_string(warn).map_err(|e| Error::io(warn, e))?;
                let stored: Vec<Warning> =
                    serde_json::from_str(&raw).map_err(|e| Error::Parse {
                        path: warn.clone(),
                        line: 1,
                        message: e.to_string(),
                    })?;
                warnings.extend(stored);
                stats.timings.index = t.elapsed().as_secs_f64();
                stats.cache.index_snapshot_hit = true;
                let prepared = Arc::new(Prepared {
                    chunks,
                    bm25: snap.bm25,
                    dense: snap.dense,
                    warnings,
                    texts,
                });
                self.remember(key, &prepared);
                return Ok((prepared, stats));
            }
        }

        let t = Instant::now();
        let (embeddings, embed_warnings, hits, misses) = match cfg.chunking_mode {
            ChunkingMode::Early => self.embed_early(&chunks)?,
            ChunkingMode::Late => self.embed_late(&chunks, &per_doc)?,
        };
        stats.cache.embedding_hits = hits;
        stats.cache.embedding_misses = misses;
        stats.timings.embed = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let records: Vec<ChunkRecord> = chunks
            .iter()
            .zip(embeddings)
            .map(|(c, e)| ChunkRecord::new(c, e, &cfg.tokenizer))
            .collect();
        let indexes = build_indexes(&records, cfg.bm25, cfg.tokenizer)?;
        let mut stage_warnings = embed_warnings;
        stage_warnings.extend(indexes.warnings);
        if let Some((bin, warn)) = &snapshot_paths {
            IndexSnapshot {
                bm25: indexes.bm25.clone(),
                dense: indexes.dense.clone(),
            }
            .save(bin)?;
            fs::write(warn, json(&stage_warnings)).map_err(|e| Error::io(warn, e))?;
        }
        warnings.extend(stage_warnings);
        stats.timings.index = t.elapsed().as_secs_f64();

        let prepared = Arc::new(Prepared {
            chunks,
            bm25: indexes.bm25,
            dense: indexes.dense,
            warnings,
            texts,
        });
        self.remember(key, &prepared);
        Ok((prepared, stats))
    }

    fn remember(&self, key: String, prepared: &Arc<Prepared>) {
        self.prepared
            .lock()
            .expect("prepared lock")
            .insert(key, prepared.clone());
    }

    fn context_key(&self, cfg: &ExperimentConfig, doc: &Document, chunk: &Chunk) -> String {
        let (start, end) = (chunk.span.start.to_le_bytes(), chunk.span.end.to_le_bytes());
        let prompt = json(&cfg.prompt);
        hex::encode(EmbeddingCache::key(&[
            self.providers.llm.name().as_bytes(),
            prompt.as_bytes(),
            doc.id.as_bytes(),
            doc.title.as_bytes(),
            doc.text.as_bytes(),
            &start,
            &end,
        ]))
    }

    fn contextualize_all(
        &self,
        cfg: &ExperimentConfig,
        chunks: &mut [Chunk],
        per_doc: &[usize],
        warnings: &mut Vec<Warning>,
    ) -> Result<(usize, usize)> {
        let ctx = Contextualizer::new(
            self.providers.llm.as_ref(),
            cfg.prompt.clone(),
            ContextualizeOptions {
                retry: self.providers.retry,
                in_flight: cfg.in_flight,
            },
        )?;
        let (mut hits, mut misses) = (0, 0);
        let mut offset = 0;
        for (doc, &n) in self.dataset.documents.iter().zip(per_doc) {
            let doc_chunks = &mut chunks[offset..offset + n];
            offset += n;
            let keys: Vec<String> = doc_chunks
                .iter()
                .map(|c| self.context_key(cfg, doc, c))
                .collect();
            let mut missing = Vec::new();
            {
                let cache = self.contexts.lock().expect("cache lock");
                for (i, (chunk, key)) in doc_chunks.iter_mut().zip(&keys).enumerate() {
                    match cache.entries.get(key) {
                        Some(c) => chunk.context = Some(c.clone()),
                        None => missing.push(i),
                    }
                }
            }
            hits += n - missing.len();
            misses += missing.len();
            if missing.is_empty() {
                continue;
            }
            let todo: Vec<Chunk> = missing.iter().map(|&i| doc_chunks[i].clone()).collect();
            let done = ctx.contextualize(doc, &todo)?;
            let degraded: Vec<usize> = done
                .warnings
                .iter()
                .filter_map(|w| match w {
                    Warning::DegradedContext { chunk_index, .. } => Some(*chunk_index),
                    _ => None,
                })
                .collect();
            let mut cache = self.contexts.lock().expect("cache lock");
            for (&i, chunk) in missing.iter().zip(done.chunks) {
                if let Some(c) = &chunk.context {
                    if !degraded.contains(&chunk.span.index) {
                        cache.insert(keys[i].clone(), c.clone());
                    }
                }
                doc_chunks[i] = chunk;
            }
            warnings.extend(done.warnings);
        }
        Ok((hits, misses))
    }

    fn cached(&self, key: &CacheKey) -> Option<(Vec<f32>, bool, bool)> {
        let cache = self.embeddings.lock().expect("cache lock");
        cache
            .get(key)
            .map(|c| (c.vector.to_vec(), c.sentinel, c.truncated))
    }

    fn sentinel(&self, chunk: &Chunk) -> ChunkEmbedding {
        ChunkEmbedding {
            doc_id: chunk.span.doc_id.clone(),
            chunk_index: chunk.span.index,
            vector: vec![0.0; self.providers.embedder.info().dim],
            sentinel: true,
        }
    }

    fn embed_early(
        &self,
        chunks: &[Chunk],
    ) -> Result<(Vec<ChunkEmbedding>, Vec<Warning>, usize, usize)> {
        let provider = self.providers.embedder.as_ref();
        let name = provider.info().name.clone();
        let texts: Vec<String> = chunks.iter().map(Chunk::indexed_text).collect();
        let keys: Vec<CacheKey> = texts
            .iter()
            .map(|t| EmbeddingCache::key(&[b"early", name.as_bytes(), t.as_bytes()]))
            .collect();

        let mut slots: Vec<Option<(ChunkEmbedding, bool)>> = vec![None; chunks.len()];
        let mut missing = Vec::new();
        for (i, chunk) in chunks.iter().enumerate() {
            if texts[i].trim().is_empty() {
                slots[i] = Some((self.sentinel(chunk), false));
            } else if let Some((vector, sentinel, truncated)) = self.cached(&keys[i]) {
                let e = ChunkEmbedding {
                    doc_id: chunk.span.doc_id.clone(),
                    chunk_index: chunk.span.index,
                    vector,
                    sentinel,
                };
                slots[i] = Some((e, truncated));
            } else {
                missing.push(i);
            }
        }
        let hits = chunks.len() - missing.len();

        let batches: Vec<Vec<(usize, ChunkEmbedding, bool)>> = self.embed_pool.install(|| {
            missing
                .par_chunks(EMBED_BATCH)
                .map(|batch| {
                    let refs: Vec<&str> = batch.iter().map(|&i| texts[i].as_str()).collect();
                    let matrices = self.providers.retry.run(|| {
                        embed_tokens_batch(provider, &refs).map_err(|e| match e {
                            Error::Provider(p) => p,
                            other => crate::error::ProviderError::Protocol {
                                provider: name.clone(),
                                message: other.to_string(),
                            },
                        })
                    })?;
                    Ok(batch
                        .iter()
                        .zip(matrices)
                        .map(|(&i, m)| {
                            let span = &chunks[i].span;
                            let pooled = mean_pool(&m, 0..m.len());
                            (
                                i,
                                to_chunk_embedding(&span.doc_id, span.index, &pooled),
                                m.truncated,
                            )
                        })
                        .collect())
                })
                .collect::<Result<_>>()
        })?;
        {
            let mut cache = self.embeddings.lock().expect("cache lock");
            for (i, e, truncated) in batches.into_iter().flatten() {
                cache.insert(keys[i], e.vector.clone(), e.sentinel, truncated);
                slots[i] = Some((e, truncated));
            }
        }

        let mut warnings = Vec::new();
        let mut out = Vec::with_capacity(chunks.len());
        for (chunk, slot) in chunks.iter().zip(slots) {
            let (e, truncated) = slot.expect("every chunk embedded");
            if truncated {
                warnings.push(Warning::Truncated {
                    doc_id: chunk.span.doc_id.clone(),
                });
            }
            if e.sentinel {
                warnings.push(Warning::EmptyChunk {
                    doc_id: chunk.span.doc_id.clone(),
                    chunk_index: chunk.span.index,
                });
            }
            out.push(e);
        }
        Ok((out, warnings, hits, missing.len()))
    }

    fn embed_late(
        &self,
        chunks: &[Chunk],
        per_doc: &[usize],
    ) -> Result<(Vec<ChunkEmbedding>, Vec<Warning>, usize, usize)> {
        let provider = self.providers.embedder.as_ref();
        let name = provider.info().name.clone();
        let docs = &self.dataset.documents;
        let mut ranges = Vec::with_capacity(docs.len());
        let mut offset = 0;
        for &n in per_doc {
            ranges.push(offset..offset + n);
            offset += n;
        }
        let late_key = |doc: &Document, c: &Chunk| {
            EmbeddingCache::key(&[
                b"late",
                name.as_bytes(),
                doc.text.as_bytes(),
                &c.span.start.to_le_bytes(),
                &c.span.end.to_le_bytes(),
            ])
        };

        type DocResult = Vec<(ChunkEmbedding, bool, Option<CacheKey>)>;
        let results: Vec<(DocResult, bool)> = self.embed_pool.install(|| {
            docs.par_iter()
                .zip(ranges.par_iter())
                .map(|(doc, range)| -> Result<(DocResult, bool)> {
                    let doc_chunks = &chunks[range.clone()];
                    if doc.text.trim().is_empty() {
                        return Ok((
                            doc_chunks
                                .iter()
                                .map(|c| (self.sentinel(c), false, None))
                                .collect(),
                            true,
                        ));
                    }
                    let keys: Vec<CacheKey> = doc_chunks.iter().map(|c| late_key(doc, c)).collect();
                    let cached: Option<DocResult> = keys
                        .iter()
                        .zip(doc_chunks)
                        .map(|(k, c)| {
                            self.cached(k).map(|(vector, sentinel, truncated)| {
                                let e = ChunkEmbedding {
                                    doc_id: c.span.doc_id.clone(),
                                    chunk_index: c.span.index,
                                    vector,
                                    sentinel,
                                };
                                (e, truncated, None)
                            })
                        })
                        .collect();
                    if let Some(hit) = cached {
                        return Ok((hit, true));
                    }
                    let matrix = self.providers.retry.run(|| {
                        embed_tokens(provider, &doc.text).map_err(|e| match e {
                            Error::Provider(p) => p,
                            other => crate::error::ProviderError::Protocol {
                                provider: name.clone(),
                                message: other.to_string(),
                            },
                        })
                    })?;
                    let spans: Vec<_> = doc_chunks.iter().map(|c| c.span.clone()).collect();
                    let pooled = pool_late(&doc.id, &matrix, &spans);
                    Ok((
                        pooled
                            .embeddings
                            .into_iter()
                            .zip(keys)
                            .map(|(e, k)| (e, matrix.truncated, Some(k)))
                            .collect(),
                        false,
                    ))
                })
                .collect::<Result<_>>()
        })?;

        let (mut hits, mut misses) = (0, 0);
        let mut out = Vec::with_capacity(chunks.len());
        let mut warnings = Vec::new();
        let mut cache = self.embeddings.lock().expect("cache lock");
        for ((doc, (entries, hit)), range) in docs.iter().zip(results).zip(&ranges) {
            if hit {
                hits += range.len();
            } else {
                misses += range.len();
            }
            if entries.iter().any(|(_, truncated, _)| *truncated) {
                warnings.push(Warning::Truncated {
                    doc_id: doc.id.clone(),
                });
            }
            for (e, truncated, key) in entries {
                if let Some(k) = key {
                    cache.insert(k, e.vector.clone(), e.sentinel, truncated);
                }
                if e.sentinel {
                    warnings.push(Warning::EmptyChunk {
                        doc_id: e.doc_id.clone(),
                        chunk_index: e.chunk_index,
                    });
                }
                out.push(e);
            }
        }
        Ok((out, warnings, hits, misses))
    }

    fn query_vector(&self, text: &str) -> Result<Vec<f32>> {
        let provider = self.providers.embedder.as_ref();
        let name = &provider.info().name;
        let key = EmbeddingCache::key(&[b"query", name.as_bytes(), text.as_bytes()]);
        if let Some((v, _, _)) = self.cached(&key) {
            return Ok(v);
        }
        let m = embed_tokens(provider, text)?;
        let e = to_chunk_embedding("", 0, &mean_pool(&m, 0..m.len()));
        self.embeddings.lock().expect("cache lock").insert(
            key,
            e.vector.clone(),
            e.sentinel,
            m.truncated,
        );
        Ok(e.vector)
    }

    fn retrieve(
        &self,
        cfg: &ExperimentConfig,
        prepared: &Prepared,
        query: &Query,
    ) -> Result<(DocRanking, Vec<Warning>)> {
        let mut warnings = Vec::new();
        let depth = cfg.fusion.candidate_depth;
        let qv = self.query_vector(&query.text)?;
        let dense = retrieve_traditional(&prepared.dense, &qv, depth)?;
        let chunks = match cfg.retrieval_method {
            RetrievalMethod::Traditional if !cfg.rerank_traditional => dense,
            RetrievalMethod::Traditional => {
                self.rerank(cfg, prepared, query, &dense, &mut warnings)?
            }
            RetrievalMethod::RankFusionRerank => {
                if cfg.tokenizer.tokenize(&query.text).is_empty() {
                    warnings.push(Warning::EmptyQuery {
                        query_id: query.id.clone(),
                    });
                }
                let sparse = retrieve_sparse(&prepared.bm25, &query.text, depth);
                let fused = fuse(&dense, &sparse, &cfg.fusion);
                self.rerank(cfg, prepared, query, &fused, &mut warnings)?
            }
        };
        Ok((aggregate_to_documents(&chunks, cfg.cutoffs.max()), warnings))
    }

    fn rerank(
        &self,
        cfg: &ExperimentConfig,
        prepared: &Prepared,
        query: &Query,
        first_stage: &ChunkRanking,
        warnings: &mut Vec<Warning>,
    ) -> Result<ChunkRanking> {
        if first_stage.is_empty() {
            return Ok(RankedList::empty());
        }
        let candidates = first_stage
            .items()
            .iter()
            .map(|(key, score)| RerankCandidate {
                key: key.clone(),
                text: prepared.indexed_text(key).unwrap_or_default().to_string(),
                prior_score: *score,
            })
            .collect();
        let reranked = rerank(
            self.providers.reranker.as_ref(),
            &RerankRequest {
                query_text: query.text.clone(),
                candidates,
                depth: cfg.fusion.candidate_depth,
            },
            self.providers.retry,
        )?;
        if let Some(reason) = reranked.degraded {
            warnings.push(Warning::DegradedRerank {
                query_id: query.id.clone(),
                reason,
            });
        }
        Ok(reranked.ranking)
    }

    fn model_label(&self, cfg: &ExperimentConfig) -> String {
        let base = cfg
            .model_label
            .clone()
            .unwrap_or_else(|| self.providers.embedder.info().name.clone());
        match cfg.chunking_mode {
            ChunkingMode::Early => base,
            ChunkingMode::Late => format!("{base} (late)"),
        }
    }

    /// Runs one experiment cell.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunOutcome> {
        self.check_cell(cfg)?;
        let (prepared, stats) = self.prepare_inner(cfg)?;
        let mut timings = stats.timings;

        let t = Instant::now();
        let per_query: Vec<(DocRanking, Vec<Warning>)> = self
            .dataset
            .queries
            .par_iter()
            .map(|q| self.retrieve(cfg, &prepared, q))
            .collect::<Result<_>>()?;
        timings.retrieve = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut warnings = prepared.warnings.clone();
        let mut rankings = BTreeMap::new();
        for (q, (ranking, w)) in self.dataset.queries.iter().zip(per_query) {
            rankings.insert(q.id.clone(), ranking);
            warnings.extend(w);
        }
        let mut report = evaluate_run(
            &rankings,
            &self.dataset.qrels,
            &cfg.cutoffs,
            cfg.relevance_threshold,
        )?;
        let model = self.model_label(cfg);
        report.model = model.clone();
        report.chunking = cfg.chunking_method().label().to_string();
        report.retrieval = cfg.retrieval_method.to_string();
        timings.evaluate = t.elapsed().as_secs_f64();

        self.flush()?;

        let reranks =
            cfg.retrieval_method == RetrievalMethod::RankFusionRerank || cfg.rerank_traditional;
        let manifest = RunManifest {
            config_hash: cfg.config_hash(),
            model,
            chunking: report.chunking.clone(),
            retrieval: report.retrieval.clone(),
            chunking_mode: cfg.chunking_mode,
            providers: ProviderVersions {
                embedder: self.providers.embedder.info().name.clone(),
                llm: cfg
                    .contextualize
                    .then(|| self.providers.llm.name().to_string()),
                reranker: reranks.then(|| self.providers.reranker.name().to_string()),
            },
            corpus: self.provenance.clone(),
            chunk_count: prepared.chunks.len(),
            timings,
            cache: stats.cache,
            degraded: warnings.iter().any(Warning::is_degradation),
            warnings,
        };
        Ok(RunOutcome {
            report,
            manifest,
            rankings,
        })
    }

    /// Runs cells in order. A failing cell is recorded and the grid goes on.
    pub fn run_grid(&self, cells: &[ExperimentConfig]) -> Vec<CellResult> {
        cells
            .iter()
            .map(|cfg| {
                let outcome = self.run(cfg);
                if let Err(e) = &outcome {
                    log::warn!(
                        "cell {}×{} failed: {e}",
                        cfg.chunking_method(),
                        cfg.retrieval_method
                    );
                }
                CellResult {
                    chunking: cfg.chunking_method().label().to_string(),
                    retrieval: cfg.retrieval_method.to_string(),
                    chunking_mode: cfg.chunking_mode,
                    outcome,
                }
            })
            .collect()
    }
}

pub struct CellResult {
    pub chunking: String,
    pub retrieval: String,
    pub chunking_mode: ChunkingMode,
    pub outcome: Result<RunOutcome>,
}

/// Reports of the cells that completed, in grid order.
pub fn completed_reports(cells: &[CellResult]) -> Vec<MetricsReport> {
    cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|o| o.report.clone()))
        .collect()
}

/// One-shot run: opens a session for `cfg` and runs it.
pub fn run_experiment(cfg: &ExperimentConfig, providers: Providers) -> Result<RunOutcome> {
    Session::open(cfg, providers)?.run(cfg)
}

/// Opens one session for the first cell and runs every cell through it.
pub fn run_grid(cells: &[ExperimentConfig], providers: Providers) -> Result<Vec<CellResult>> {
    let first = cells
        .first()
        .ok_or_else(|| Error::Argument("grid has no cells".into()))?;
    Ok(Session::open(first, providers)?.run_grid(cells))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answer {
    pub text: String,
    /// Set when the provider failed and the top chunk was returned instead.
    pub degraded: Option<String>,
}

/// The question followed by the chunks (with their contexts) in rank order.
pub fn answer_prompt(query: &Query, top_chunks: &[Chunk]) -> String {
    let mut prompt = format!(
        "Answer the question using only the passages below.\n\nQuestion: {}\n\nPassages:\n",
        query.text
    );
    for (i, c) in top_chunks.iter().enumerate() {
        prompt.push_str(&format!("[{}] {}\n", i + 1, c.indexed_text()));
    }
    prompt
}

/// Answers `query` from retrieved chunks.
pub fn generate_answer(
    llm: &dyn LlmProvider,
    query: &Query,
    top_chunks: &[Chunk],
) -> Result<Answer> {
    let Some(top) = top_chunks.first() else {
        return Err(Error::Argument(
            "answer generation needs at least one chunk".into(),
        ));
    };
    let prompt = answer_prompt(query, top_chunks);
    let evidence: Vec<String> = top_chunks.iter().map(|c| c.text.clone()).collect();
    match llm.answer(&prompt, &evidence) {
        Ok(text) if !text.trim().is_empty() => Ok(Answer {
            text,
            degraded: None,
        }),
        Ok(_) => Ok(Answer {
            text: top.text.clone(),
            degraded: Some("empty generation".into()),
        }),
        Err(e) => Ok(Answer {
            text: top.text.clone(),
            degraded: Some(e.to_string()),
        }),
    }
}

/// Writes reports as JSON lines and the manifests as a JSON array.
pub fn write_outputs(dir: &Path, outcomes: &[&RunOutcome]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let manifests: Vec<&RunManifest> = outcomes.iter().map(|o| &o.manifest).collect();
    let rp = dir.join("reports.jsonl");
    fs::write(&rp, crate::evaluation::render_jsonl(&reports)).map_err(|e| Error::io(&rp, e))?;
    let mp = dir.join("manifests.json");
    let body = serde_json::to_string_pretty(&manifests).expect("serializable");
    fs::write(&mp, body).map_err(|e| Error::io(&mp, e))
}

/// Reads a `reports.jsonl` written by [`write_outputs`].
pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
