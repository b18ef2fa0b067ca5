//! Client for the model sidecar: a JSON-over-HTTP service exposing
//! token-level embeddings, cross-encoder reranking and text generation.
//!
//! ```text
//! GET  /v1/info      -> {models: {embed, rerank, generate}, dim, max_tokens, max_concurrency}
//! POST /v1/embed     {texts, mode: "tokens"} -> {results: [{dim, tokens: [{start, end, special}], vectors, truncated}]}
//! POST /v1/rerank    {query, documents}      -> {scores}
//! POST /v1/generate  {prompt, max_tokens}    -> {text}
//! ```
//!
//! Token offsets are char offsets into the submitted text. Special tokens
//! come back zero-width with `special: true` and are dropped before pooling.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::contextualizer::LlmProvider;
use crate::embedding::{EmbeddingProvider, EmbeddingProviderInfo, TokenEmbeddingMatrix};
use crate::error::{Error, ProviderError, Result};
use crate::retrieval::RerankProvider;
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelNames {
    #[serde(default)]
    pub embed: Option<String>,
    #[serde(default)]
    pub rerank: Option<String>,
    #[serde(default)]
    pub generate: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub models: ModelNames,
    pub dim: usize,
    pub max_tokens: usize,
    #[serde(default = "one")]
    pub max_concurrency: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest<'a> {
    pub texts: Vec<&'a str>,
    pub mode: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOffset {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub special: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResult {
    pub dim: usize,
    pub tokens: Vec<TokenOffset>,
    pub vectors: Vec<Vec<f32>>,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub results: Vec<EmbedResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankRequestBody<'a> {
    pub query: &'a str,
    pub documents: Vec<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

impl EmbedResult {
    /// Drops special tokens and flattens into a token matrix.
    pub fn into_matrix(
        self,
        provider: &str,
    ) -> std::result::Result<TokenEmbeddingMatrix, ProviderError> {
        let protocol = |message: String| ProviderError::Protocol {
            provider: provider.to_string(),
            message,
        };
        if self.tokens.len() != self.vectors.len() {
            return Err(protocol(format!(
                "{} token offsets but {} vectors",
                self.tokens.len(),
                self.vectors.len()
            )));
        }
        let mut tokens = Vec::with_capacity(self.tokens.len());
        let mut vectors = Vec::with_capacity(self.tokens.len() * self.dim);
        for (t, v) in self.tokens.into_iter().zip(self.vectors) {
            if t.special {
                continue;
            }
            if v.len() != self.dim {
                return Err(protocol(format!(
                    "vector of length {} for dim {}",
                    v.len(),
                    self.dim
                )));
            }
            tokens.push((t.start, t.end));
            vectors.extend(v);
        }
        Ok(TokenEmbeddingMatrix {
            tokens,
            vectors,
            dim: self.dim,
            truncated: self.truncated,
        })
    }
}

/// Blocking client implementing all three provider traits.
pub struct SidecarClient {
    base_url: String,
    http: reqwest::blocking::Client,
    info: InfoResponse,
    embed_info: EmbeddingProviderInfo,
    retry: RetryPolicy,
}

impl SidecarClient {
    /// Connects and fetches `/v1/info`. Fails fast when the service is
    /// unreachable.
    pub fn connect(base_url: &str, timeout: Duration, retry: RetryPolicy) -> Result<Self> {
        let base_url = base_url.trim_end_matches('/').to_string();
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let name = format!("sidecar({base_url})");
        let info: InfoResponse = retry.run(|| {
            let resp = http
                .get(format!("{base_url}/v1/info"))
                .send()
                .map_err(|e| transport(&name, e))?;
            decode(&name, resp)
        })?;
        if info.dim == 0 || info.max_tokens == 0 {
            return Err(ProviderError::Protocol {
                provider: name,
                message: "info reports zero dim or max_tokens".into(),
            }
            .into());
        }
        let embed_info = EmbeddingProviderInfo {
            name: format!(
                "sidecar:{}",
                info.models.embed.as_deref().unwrap_or("unknown-embedder")
            ),
            dim: info.dim,
            max_tokens: info.max_tokens,
            max_concurrency: info.max_concurrency.max(1),
        };
        Ok(SidecarClient {
            base_url,
            http,
            info,
            embed_info,
            retry,
        })
    }

    pub fn service_info(&self) -> &InfoResponse {
        &self.info
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> std::result::Result<R, ProviderError> {
        let name = &self.embed_info.name;
        self.retry.run(|| {
            let resp = self
                .http
                .post(format!("{}{path}", self.base_url))
                .json(body)
                .send()
                .map_err(|e| transport(name, e))?;
            decode(name, resp)
        })
    }
}

fn transport(provider: &str, e: reqwest::Error) -> ProviderError {
    ProviderError::Transport {
        provider: provider.to_string(),
        message: e.to_string(),
    }
}

fn decode<R: for<'de> Deserialize<'de>>(
    provider: &str,
    resp: reqwest::blocking::Response,
) -> std::result::Result<R, ProviderError> {
    let status = resp.status();
    let body = resp.text().map_err(|e| transport(provider, e))?;
    if !status.is_success() {
        return Err(ProviderError::Status {
            provider: provider.to_string(),
            status: status.as_u16(),
            body,
        });
    }
    serde_json::from_str(&body).map_err(|e| ProviderError::Protocol {
        provider: provider.to_string(),
        message: format!("undecodable response: {e}"),
    })
}

impl EmbeddingProvider for SidecarClient {
    fn info(&self) -> &EmbeddingProviderInfo {
        &self.embed_info
    }

    fn embed_tokens_batch(
        &self,
        texts: &[&str],
    ) -> std::result::Result<Vec<TokenEmbeddingMatrix>, ProviderError> {
        let resp: EmbedResponse = self.post(
            "/v1/embed",
            &EmbedRequest {
                texts: texts.to_vec(),
                mode: "tokens",
            },
        )?;
        resp.results
            .into_iter()
            .map(|r| r.into_matrix(&self.embed_info.name))
            .collect()
    }
}

impl RerankProvider for SidecarClient {
    fn name(&self) -> &str {
        self.info
            .models
            .rerank
            .as_deref()
            .unwrap_or("sidecar-reranker")
    }

    fn score(
        &self,
        query: &str,
        passages: &[&str],
    ) -> std::result::Result<Vec<f64>, ProviderError> {
        let resp: RerankResponse = self.post(
            "/v1/rerank",
            &RerankRequestBody {
                query,
                documents: passages.to_vec(),
            },
        )?;
        Ok(resp.scores)
    }
}

impl LlmProvider for SidecarClient {
    fn name(&self) -> &str {
        self.info
            .models
            .generate
            .as_deref()
            .unwrap_or("sidecar-llm")
    }

    fn generate(
        &self,
        prompt: &str,
        max_tokens: usize,
    ) -> std::result::Result<String, ProviderError> {
        let resp: GenerateResponse =
            self.post("/v1/generate", &GenerateRequest { prompt, max_tokens })?;
        Ok(resp.text)
    }

    fn max_concurrency(&self) -> usize {
        self.info.max_concurrency.max(1)
    }
}
