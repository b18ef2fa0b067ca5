//! Early and late chunking on top of a token-level embedding provider.
//!
//! Early chunking embeds every chunk on its own and mean-pools the chunk's
//! tokens. Late chunking embeds the whole document once and mean-pools the
//! document's token vectors inside each chunk span, so every chunk vector
//! carries whatever context the model mixed into its tokens.
//!
//! In both paths pooling runs over the raw token vectors and the pooled vector
//! is L2-normalized once afterwards.

mod cache;
mod test_embedder;

pub use cache::{CacheKey, CachedVector, EmbeddingCache, CACHE_MAGIC, CACHE_VERSION};
pub use test_embedder::{fnv1a_64, TestEmbedder, TestEmbedderConfig};

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::diagnostics::Warning;
use crate::error::{Error, ProviderError, Result};
use crate::segmenter::{check_tiling, Chunk, ChunkSpan};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProviderInfo {
    pub name: String,
    pub dim: usize,
    pub max_tokens: usize,
    /// Upper bound on concurrent requests the provider accepts.
    pub max_concurrency: usize,
}

/// Per-token vectors of one text. Offsets are char offsets into that text;
/// vectors are stored row-major and are not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix {
    pub tokens: Vec<(usize, usize)>,
    pub vectors: Vec<f32>,
    pub dim: usize,
    /// The provider dropped tokens past its context limit.
    pub truncated: bool,
}

impl TokenEmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks the shape and offset invariants against the embedded text.
    pub fn validate(&self, text_chars: usize) -> std::result::Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be > 0".into());
        }
        if self.vectors.len() != self.tokens.len() * self.dim {
            return Err(format!(
                "{} vector components for {} tokens of dim {}",
                self.vectors.len(),
                self.tokens.len(),
                self.dim
            ));
        }
        let mut prev_end = 0;
        for &(start, end) in &self.tokens {
            if start < prev_end || end < start || end > text_chars {
                return Err(format!("bad token offsets ({start}, {end})"));
            }
            prev_end = end;
        }
        Ok(())
    }
}

/// A backend that returns contextual token embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn info(&self) -> &EmbeddingProviderInfo;

    /// Token embeddings for each text, in input order.
    fn embed_tokens_batch(
        &self,
        texts: &[&str],
    ) -> std::result::Result<Vec<TokenEmbeddingMatrix>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEmbedding {
    pub doc_id: String,
    pub chunk_index: usize,
    /// Unit-norm, or all zeros when `sentinel` is set.
    pub vector: Vec<f32>,
    /// The chunk pooled no tokens (or a zero vector); excluded from dense
    /// retrieval.
    pub sentinel: bool,
}

/// Result of [`normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Input was the zero vector; `vector` is all zeros.
    pub zero: bool,
}

/// Scales `v` to unit L2 norm. The zero vector maps to itself, flagged.
pub fn normalize(v: &[f64]) -> Normalized {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Normalized {
            vector: vec![0.0; v.len()],
            zero: true,
        };
    }
    Normalized {
        vector: v.iter().map(|x| x / norm).collect(),
        zero: false,
    }
}

/// Arithmetic mean of the selected rows, accumulated in f64.
pub fn mean_pool(matrix: &TokenEmbeddingMatrix, rows: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0f64; matrix.dim];
    let mut n = 0usize;
    for r in rows {
        for (a, &x) in acc.iter_mut().zip(matrix.row(r)) {
            *a += f64::from(x);
        }
        n += 1;
    }
    if n > 0 {
        for a in &mut acc {
            *a /= n as f64;
        }
    }
    acc
}

/// Normalizes a pooled vector into a chunk embedding; zero pools become the
/// sentinel.
pub fn to_chunk_embedding(doc_id: &str, chunk_index: usize, pooled: &[f64]) -> ChunkEmbedding {
    let unit = normalize(pooled);
    ChunkEmbedding {
        doc_id: doc_id.to_string(),
        chunk_index,
        vector: unit.vector.iter().map(|&x| x as f32).collect(),
        sentinel: unit.zero,
    }
}

fn check_response(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
    out: &[TokenEmbeddingMatrix],
) -> Result<()> {
    let protocol = |message: String| {
        Error::Provider(ProviderError::Protocol {
            provider: provider.info().name.clone(),
            message,
        })
    };
    if out.len() != texts.len() {
        return Err(protocol(format!(
            "{} results for {} texts",
            out.len(),
            texts.len()
        )));
    }
    for (m, t) in out.iter().zip(texts) {
        if m.dim != provider.info().dim {
            return Err(protocol(format!(
                "dim {} != advertised {}",
                m.dim,
                provider.info().dim
            )));
        }
        m.validate(text::char_len(t)).map_err(protocol)?;
    }
    Ok(())
}

/// Token-level embedding of a batch of texts, with contract checks and
/// degenerate-input errors.
pub fn embed_tokens_batch(
    provider: &dyn EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<TokenEmbeddingMatrix>> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::DegenerateInput(format!("text #{i} is empty")));
    }
    let out = provider.embed_tokens_batch(texts)?;
    check_response(provider, texts, &out)?;
    if let Some(i) = out.iter().position(TokenEmbeddingMatrix::is_empty) {
        return Err(Error::DegenerateInput(format!(
            "text #{i} produced no tokens"
        )));
    }
    Ok(out)
}

/// Token-level embedding of one text.
pub fn embed_tokens(provider: &dyn EmbeddingProvider, text: &str) -> Result<TokenEmbeddingMatrix> {
    Ok(embed_tokens_batch(provider, &[text])?
        .pop()
        .expect("one result"))
}

/// Early chunking: embed the chunk's indexed text alone and mean-pool it.
pub fn embed_chunk_early(
    provider: &dyn EmbeddingProvider,
    chunk: &Chunk,
) -> Result<ChunkEmbedding> {
    Ok(embed_chunks_early(provider, std::slice::from_ref(chunk))?
        .embeddings
        .pop()
        .expect("one result"))
}

#[derive(Debug, Clone, Default)]
pub struct Embedded {
    pub embeddings: Vec<ChunkEmbedding>,
    pub warnings: Vec<Warning>,
}

/// Early chunking over a batch of chunks (one provider request).
pub fn embed_chunks_early(provider: &dyn EmbeddingProvider, chunks: &[Chunk]) -> Result<Embedded> {
    let texts: Vec<String> = chunks.iter().map(Chunk::indexed_text).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let matrices = embed_tokens_batch(provider, &refs)?;
    let mut out = Embedded::default();
    for (chunk, m) in chunks.iter().zip(&matrices) {
        if m.truncated {
            out.warnings.push(Warning::Truncated {
                doc_id: chunk.span.doc_id.clone(),
            });
        }
        let pooled = mean_pool(m, 0..m.len());
        out.embeddings.push(to_chunk_embedding(
            &chunk.span.doc_id,
            chunk.span.index,
            &pooled,
        ));
    }
    Ok(out)
}

/// Index of the span containing each token's start offset. Spans must tile
/// the text; tokens starting past the last span are unassigned.
pub fn assign_tokens(tokens: &[(usize, usize)], spans: &[ChunkSpan]) -> Vec<Option<usize>> {
    tokens
        .iter()
        .map(|&(start, _)| {
            let i = spans.partition_point(|s| s.end <= start);
            (i < spans.len() && spans[i].start <= start).then_some(i)
        })
        .collect()
}

/// Late chunking: embed the whole document once and mean-pool the token
/// vectors whose start offset falls in each span.
///
/// Spans that receive no tokens (blank spans, or spans beyond a truncation
/// point) get the zero-vector sentinel and a warning.
pub fn embed_chunks_late(
    provider: &dyn EmbeddingProvider,
    doc: &Document,
    spans: &[ChunkSpan],
) -> Result<Embedded> {
    check_tiling(spans, text::char_len(&doc.text))?;
    let matrix = embed_tokens(provider, &doc.text)?;
    Ok(pool_late(&doc.id, &matrix, spans))
}

/// Pooling half of late chunking, split out for reuse with cached matrices.
pub fn pool_late(doc_id: &str, matrix: &TokenEmbeddingMatrix, spans: &[ChunkSpan]) -> Embedded {
    let mut out = Embedded::default();
    if matrix.truncated {
        out.warnings.push(Warning::Truncated {
            doc_id: doc_id.to_string(),
        });
    }
    let assignment = assign_tokens(&matrix.tokens, spans);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spans.len()];
    for (token, chunk) in assignment.into_iter().enumerate() {
        if let Some(c) = chunk {
            members[c].push(token);
        }
    }
    for (span, rows) in spans.iter().zip(members) {
        if rows.is_empty() {
            out.warnings.push(Warning::EmptyChunk {
                doc_id: doc_id.to_string(),
                chunk_index: span.index,
            });
        }
        let pooled = mean_pool(matrix, rows);
        out.embeddings
            .push(to_chunk_embedding(doc_id, span.index, &pooled));
    }
    out
}

/// Query vector: the query text embedded and pooled like an early chunk.
pub fn embed_query(provider: &dyn EmbeddingProvider, query: &str) -> Result<Vec<f32>> {
    let m = embed_tokens(provider, query)?;
    let unit = normalize(&mean_pool(&m, 0..m.len()));
    Ok(unit.vector.iter().map(|&x| x as f32).collect())
}
