//! Deterministic context-mixing embedder used as the oracle backend.
//!
//! Each whitespace token `t` (lowercased) hashes to a one-hot basis vector
//! `e_h(t)` with `h = fnv1a_64(t) mod dim`. Its contextual embedding is
//!
//! ```text
//! v(t) = (1 - alpha) * e_h(t) + alpha * mean over input tokens u of e_h(u)
//! ```
//!
//! so `alpha = 0` yields context-free embeddings and larger `alpha` lets the
//! rest of the input leak into each token, which is what makes late chunking
//! differ from early chunking.

use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, EmbeddingProviderInfo, TokenEmbeddingMatrix};
use crate::error::{Error, ProviderError, Result};
use crate::text::whitespace_token_spans;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestEmbedderConfig {
    pub dim: usize,
    pub alpha: f64,
    pub max_tokens: usize,
}

impl Default for TestEmbedderConfig {
    fn default() -> Self {
        TestEmbedderConfig {
            dim: 64,
            alpha: 0.5,
            max_tokens: 8192,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestEmbedder {
    config: TestEmbedderConfig,
    info: EmbeddingProviderInfo,
}

impl TestEmbedder {
    pub fn new(config: TestEmbedderConfig) -> Result<Self> {
        if config.dim == 0 || config.max_tokens == 0 {
            return Err(Error::Config(
                "test embedder dim and max_tokens must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::Config(format!(
                "test embedder alpha must be in [0, 1], got {}",
                config.alpha
            )));
        }
        let info = EmbeddingProviderInfo {
            name: format!(
                "test-embedder(dim={},alpha={},max_tokens={})",
                config.dim, config.alpha, config.max_tokens
            ),
            dim: config.dim,
            max_tokens: config.max_tokens,
            max_concurrency: usize::MAX,
        };
        Ok(TestEmbedder { config, info })
    }

    pub fn config(&self) -> &TestEmbedderConfig {
        &self.config
    }

    /// Basis index of a token.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a_64(token.to_lowercase().as_bytes()) % self.config.dim as u64) as usize
    }

    pub fn embed_text(&self, text: &str) -> TokenEmbeddingMatrix {
        let mut tokens = whitespace_token_spans(text);
        let truncated = tokens.len() > self.config.max_tokens;
        tokens.truncate(self.config.max_tokens);

        let chars: Vec<char> = text.chars().collect();
        let buckets: Vec<usize> = tokens
            .iter()
            .map(|&(s, e)| self.bucket(&chars[s..e].iter().collect::<String>()))
            .collect();

        let dim = self.config.dim;
        let alpha = self.config.alpha;
        let mut context = vec![0.0f64; dim];
        for &b in &buckets {
            context[b] += 1.0;
        }
        let n = buckets.len().max(1) as f64;
        for c in &mut context {
            *c *= alpha / n;
        }

        let mut vectors = Vec::with_capacity(buckets.len() * dim);
        for &b in &buckets {
            let start = vectors.len();
            vectors.extend(context.iter().map(|&c| c as f32));
            vectors[start + b] = ((1.0 - alpha) + context[b]) as f32;
        }
        TokenEmbeddingMatrix {
            tokens,
            vectors,
            dim,
            truncated,
        }
    }
}

impl EmbeddingProvider for TestEmbedder {
    fn info(&self) -> &EmbeddingProviderInfo {
        &self.info
    }

    fn embed_tokens_batch(
        &self,
        texts: &[&str],
    ) -> std::result::Result<Vec<TokenEmbeddingMatrix>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}
