//! Declarative experiment configuration (TOML).
//!
//! ```toml
//! chunking_mode = "early"          # or "late"
//! contextualize = true
//! retrieval_method = "RFR"         # or "TR"
//! cutoffs = [5, 10]
//! cache_dir = ".rechunk-cache"
//!
//! [dataset]
//! corpus = "data/corpus.jsonl"
//! queries = "data/queries.jsonl"
//! qrels = "data/qrels/test.tsv"
//!
//! [segmenter]
//! strategy = "semantic"
//! max_chunk_chars = 512
//!
//! [providers]
//! kind = "mock"                    # or "sidecar" with endpoint = "http://..."
//! ```
//!
//! `RECHUNK_SIDECAR_URL` overrides `providers.endpoint`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contextualizer::ContextPrompt;
use crate::corpus::{CorpusSubset, DatasetPaths};
use crate::embedding::TestEmbedderConfig;
use crate::error::{Error, Result};
use crate::evaluation::CutoffSet;
use crate::index::Bm25Params;
use crate::retrieval::FusionConfig;
use crate::segmenter::{SegmenterConfig, Strategy};
use crate::text::LexicalTokenizer;

pub const SIDECAR_URL_ENV: &str = "RECHUNK_SIDECAR_URL";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkingMode {
    #[default]
    Early,
    Late,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalMethod {
    /// Dense-only retrieval.
    #[default]
    #[serde(rename = "TR", alias = "tr")]
    Traditional,
    /// Weighted dense + BM25 fusion, then reranking.
    #[serde(rename = "RFR", alias = "rfr")]
    RankFusionRerank,
}

impl fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMethod::Traditional => "TR",
            RetrievalMethod::RankFusionRerank => "RFR",
        })
    }
}

/// FUC / SUC / FCC / SCC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChunkingMethod {
    #[serde(rename = "FUC")]
    FixedUncontextualized,
    #[serde(rename = "SUC")]
    SemanticUncontextualized,
    #[serde(rename = "FCC")]
    FixedContextualized,
    #[serde(rename = "SCC")]
    SemanticContextualized,
}

impl ChunkingMethod {
    pub const ALL: [ChunkingMethod; 4] = [
        ChunkingMethod::FixedUncontextualized,
        ChunkingMethod::SemanticUncontextualized,
        ChunkingMethod::FixedContextualized,
        ChunkingMethod::SemanticContextualized,
    ];

    pub fn of(strategy: Strategy, contextualize: bool) -> Self {
        match (strategy, contextualize) {
            (Strategy::FixedWindow, false) => ChunkingMethod::FixedUncontextualized,
            (Strategy::Semantic, false) => ChunkingMethod::SemanticUncontextualized,
            (Strategy::FixedWindow, true) => ChunkingMethod::FixedContextualized,
            (Strategy::Semantic, true) => ChunkingMethod::SemanticContextualized,
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            ChunkingMethod::FixedUncontextualized | ChunkingMethod::FixedContextualized => {
                Strategy::FixedWindow
            }
            _ => Strategy::Semantic,
        }
    }

    pub fn contextualized(self) -> bool {
        matches!(
            self,
            ChunkingMethod::FixedContextualized | ChunkingMethod::SemanticContextualized
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            ChunkingMethod::FixedUncontextualized => "FUC",
            ChunkingMethod::SemanticUncontextualized => "SUC",
            ChunkingMethod::FixedContextualized => "FCC",
            ChunkingMethod::SemanticContextualized => "SCC",
        }
    }
}

impl fmt::Display for ChunkingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Test embedder, mock contextualizer, overlap reranker.
    #[default]
    Mock,
    /// Model sidecar over HTTP.
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub test_embedder: TestEmbedderConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: None,
            timeout_secs: 60,
            test_embedder: TestEmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetPaths,
    pub subset: CorpusSubset,
    pub segmenter: SegmenterConfig,
    pub chunking_mode: ChunkingMode,
    pub contextualize: bool,
    pub prompt: ContextPrompt,
    pub providers: ProviderConfig,
    pub tokenizer: LexicalTokenizer,
    pub bm25: Bm25Params,
    pub fusion: FusionConfig,
    pub retrieval_method: RetrievalMethod,
    /// Rerank TR results too. Ablation only; off by default.
    pub rerank_traditional: bool,
    pub cutoffs: CutoffSet,
    pub relevance_threshold: u32,
    pub cache_dir: Option<PathBuf>,
    pub query_limit: Option<usize>,
    /// In-flight limit for context generation.
    pub in_flight: usize,
    /// Shown in the Model column of reports; defaults to the embedder name.
    pub model_label: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetPaths::default(),
            subset: CorpusSubset::default(),
            segmenter: SegmenterConfig::default(),
            chunking_mode: ChunkingMode::Early,
            contextualize: false,
            prompt: ContextPrompt::default(),
            providers: ProviderConfig::default(),
            tokenizer: LexicalTokenizer::default(),
            bm25: Bm25Params::default(),
            fusion: FusionConfig::default(),
            retrieval_method: RetrievalMethod::Traditional,
            rerank_traditional: false,
            cutoffs: CutoffSet::default(),
            relevance_threshold: 1,
            cache_dir: None,
            query_limit: None,
            in_flight: 4,
            model_label: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML and resolves relative paths against `base_dir`.
    pub fn from_toml_str(raw: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))?;
        cfg.dataset = cfg.dataset.relative_to(base_dir);
        if let Some(dir) = &cfg.cache_dir {
            if dir.is_relative() {
                cfg.cache_dir = Some(base_dir.join(dir));
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&raw, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies environment overrides.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(SIDECAR_URL_ENV) {
            if !url.is_empty() {
                self.providers.endpoint = Some(url);
            }
        }
    }

    pub fn chunking_method(&self) -> ChunkingMethod {
        ChunkingMethod::of(self.segmenter.strategy, self.contextualize)
    }

    pub fn validate(&self) -> Result<()> {
        self.subset.validate()?;
        self.segmenter.validate()?;
        self.bm25.validate()?;
        self.fusion.validate()?;
        self.cutoffs.validate()?;
        if self.contextualize {
            self.prompt.validate()?;
        }
        if self.contextualize && self.chunking_mode == ChunkingMode::Late {
            return Err(Error::Config(
                "late chunking pools the document's own tokens and cannot carry prepended \
                 contexts; use chunking_mode = \"early\" with contextualize = true"
                    .into(),
            ));
        }
        if self.fusion.candidate_depth < self.cutoffs.max() {
            return Err(Error::Config(format!(
                "fusion.candidate_depth ({}) must be >= the largest cutoff ({})",
                self.fusion.candidate_depth,
                self.cutoffs.max()
            )));
        }
        if self.relevance_threshold == 0 {
            return Err(Error::Config("relevance_threshold must be >= 1".into()));
        }
        if self.in_flight == 0 {
            return Err(Error::Config("in_flight must be >= 1".into()));
        }
        if self.query_limit == Some(0) {
            return Err(Error::Config("query_limit must be >= 1 when set".into()));
        }
        if self.providers.kind == ProviderKind::Sidecar && self.providers.endpoint.is_none() {
            return Err(Error::Config(format!(
                "sidecar providers need providers.endpoint or {SIDECAR_URL_ENV}"
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (object keys sorted), so the
    /// hash does not depend on field order in the source file.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<&String, String> =
                map.iter().map(|(k, v)| (k, canonical_json(v))).collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{v}", serde_json::to_string(k).unwrap()))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        serde_json::Value::Array(items) => {
            format!(
                "[{}]",
                items
                    .iter()
                    .map(canonical_json)
                    .collect::<Vec<_>>()
                    .join(",")
            )
        }
        other => other.to_string(),
    }
}

/// Which axes a grid varies. Cells are ordered chunking method first, then
/// retrieval method, then chunking mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub chunking_methods: Vec<ChunkingMethod>,
    pub retrieval_methods: Vec<RetrievalMethod>,
    pub chunking_modes: Vec<ChunkingMode>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            chunking_methods: ChunkingMethod::ALL.to_vec(),
            retrieval_methods: vec![
                RetrievalMethod::Traditional,
                RetrievalMethod::RankFusionRerank,
            ],
            chunking_modes: vec![ChunkingMode::Early],
        }
    }
}

impl GridSpec {
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut cells = Vec::new();
        for &cm in &self.chunking_methods {
            for &rm in &self.retrieval_methods {
                for &mode in &self.chunking_modes {
                    let mut cfg = base.clone();
                    cfg.segmenter.strategy = cm.strategy();
                    cfg.contextualize = cm.contextualized();
                    cfg.retrieval_method = rm;
                    cfg.chunking_mode = mode;
                    cells.push(cfg);
                }
            }
        }
        cells
    }
}
