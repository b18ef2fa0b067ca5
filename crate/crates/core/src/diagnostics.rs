use serde::{Deserialize, Serialize};

/// Non-fatal events recorded while a run proceeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// The provider cut the text at its context limit.
    Truncated { doc_id: String },
    /// A chunk received no tokens and was given the zero-vector sentinel.
    EmptyChunk { doc_id: String, chunk_index: usize },
    /// A zero-sentinel record was left out of the dense index.
    ExcludedFromDense { doc_id: String, chunk_index: usize },
    /// The query produced no lexical terms.
    EmptyQuery { query_id: String },
    /// Context generation failed or came back empty; a fallback was used.
    DegradedContext {
        doc_id: String,
        chunk_index: usize,
        reason: String,
    },
    /// Reranking failed; fusion order was kept.
    DegradedRerank { query_id: String, reason: String },
    /// Answer generation failed; the extractive fallback was used.
    DegradedAnswer { query_id: String, reason: String },
}

impl Warning {
    /// Whether this warning marks the run as degraded.
    pub fn is_degradation(&self) -> bool {
        matches!(
            self,
            Warning::DegradedContext { .. }
                | Warning::DegradedRerank { .. }
                | Warning::DegradedAnswer { .. }
        )
    }
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::Truncated { doc_id } => {
                write!(f, "{doc_id}: truncated at the provider's token limit")
            }
            Warning::EmptyChunk {
                doc_id,
                chunk_index,
            } => write!(f, "{doc_id}#{chunk_index}: no tokens, zero-vector sentinel"),
            Warning::ExcludedFromDense {
                doc_id,
                chunk_index,
            } => {
                write!(f, "{doc_id}#{chunk_index}: excluded from the dense index")
            }
            Warning::EmptyQuery { query_id } => write!(f, "{query_id}: query has no lexical terms"),
            Warning::DegradedContext {
                doc_id,
                chunk_index,
                reason,
            } => {
                write!(f, "{doc_id}#{chunk_index}: context fallback ({reason})")
            }
            Warning::DegradedRerank { query_id, reason } => {
                write!(f, "{query_id}: rerank skipped ({reason})")
            }
            Warning::DegradedAnswer { query_id, reason } => {
                write!(f, "{query_id}: extractive answer fallback ({reason})")
            }
        }
    }
}
