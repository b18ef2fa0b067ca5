//! Early and late chunking, contextual retrieval, weighted rank fusion with
//! reranking, and NDCG/MAP/F1 evaluation over BEIR-shaped corpora.
//!
//! The pipeline runs segment → (contextualize) → embed → index → retrieve →
//! aggregate → evaluate. Model backends sit behind [`EmbeddingProvider`],
//! [`LlmProvider`] and [`RerankProvider`]; deterministic mock backends are
//! included, and [`sidecar::SidecarClient`] speaks to an HTTP model service.

mod bytes;
pub mod config;
pub mod contextualizer;
pub mod corpus;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod retrieval;
pub mod retry;
pub mod runner;
pub mod segmenter;
pub mod sidecar;
pub mod text;

pub use config::{
    ChunkingMethod, ChunkingMode, ExperimentConfig, GridSpec, ProviderConfig, ProviderKind,
    RetrievalMethod,
};
pub use contextualizer::{ContextPrompt, LlmProvider, MockLlm};
pub use corpus::{CorpusSubset, Dataset, DatasetPaths, Document, QrelSet, Query, SubsetMode};
pub use diagnostics::Warning;
pub use embedding::{
    ChunkEmbedding, EmbeddingProvider, TestEmbedder, TestEmbedderConfig, TokenEmbeddingMatrix,
};
pub use error::{Error, ProviderError, Result};
pub use evaluation::{CutoffSet, MetricsReport};
pub use index::{Bm25Index, Bm25Params, ChunkKey, ChunkRecord, DenseIndex};
pub use retrieval::{
    ChunkRanking, DocRanking, FusionConfig, MockOverlapReranker, Normalization, RankedList,
    RerankProvider,
};
pub use retry::RetryPolicy;
pub use runner::{Providers, RunManifest, RunOutcome, Session};
pub use segmenter::{Chunk, ChunkSpan, SegmenterConfig, Strategy};
pub use text::LexicalTokenizer;
