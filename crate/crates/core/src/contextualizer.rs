//! Contextual retrieval: prepend an LLM-generated, document-situating
//! context to every chunk before it is embedded and indexed.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::diagnostics::Warning;
use crate::error::{Error, ProviderError, Result};
use crate::retry::RetryPolicy;
use crate::segmenter::Chunk;
use crate::text;

pub const DOCUMENT_PLACEHOLDER: &str = "{document}";
pub const CHUNK_PLACEHOLDER: &str = "{chunk}";

pub const DEFAULT_CONTEXT_TEMPLATE: &str = "<document>\n{document}\n</document>\n\
Here is the chunk we want to situate within the whole document\n\
<chunk>\n{chunk}\n</chunk>\n\
Please give a short succinct context to situate this chunk within the overall document \
for the purposes of improving search retrieval of the chunk. \
Answer only with the succinct context and nothing else.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextPrompt {
    pub template: String,
    pub max_context_tokens: usize,
}

impl Default for ContextPrompt {
    fn default() -> Self {
        ContextPrompt {
            template: DEFAULT_CONTEXT_TEMPLATE.to_string(),
            max_context_tokens: 128,
        }
    }
}

impl ContextPrompt {
    pub fn validate(&self) -> Result<()> {
        for p in [DOCUMENT_PLACEHOLDER, CHUNK_PLACEHOLDER] {
            let n = self.template.matches(p).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "prompt template must contain {p} exactly once (found {n})"
                )));
            }
        }
        if self.max_context_tokens == 0 {
            return Err(Error::Config("max_context_tokens must be > 0".into()));
        }
        Ok(())
    }
}

/// Fills the template's placeholders in a single pass, so placeholder-like
/// text inside the document or chunk is copied verbatim.
pub fn build_prompt(prompt: &ContextPrompt, doc: &Document, chunk: &Chunk) -> Result<String> {
    prompt.validate()?;
    let t = &prompt.template;
    let d = t.find(DOCUMENT_PLACEHOLDER).unwrap();
    let c = t.find(CHUNK_PLACEHOLDER).unwrap();
    let mut parts = [
        (d, DOCUMENT_PLACEHOLDER.len(), doc.text.as_str()),
        (c, CHUNK_PLACEHOLDER.len(), chunk.text.as_str()),
    ];
    parts.sort_by_key(|p| p.0);
    let mut out = String::with_capacity(t.len() + doc.text.len() + chunk.text.len());
    let mut cursor = 0;
    for (at, len, value) in parts {
        out.push_str(&t[cursor..at]);
        out.push_str(value);
        cursor = at + len;
    }
    out.push_str(&t[cursor..]);
    Ok(out)
}

/// The deterministic stand-in context: `Document: {title}. {first sentence}`.
pub fn mock_context(doc: &Document) -> String {
    let first = text::first_sentence(&doc.text);
    let title = doc.title.trim().trim_end_matches('.');
    if title.is_empty() {
        format!("Document: {first}")
    } else {
        format!("Document: {title}. {first}")
    }
}

/// Keeps at most `max_tokens` whitespace tokens of `s`.
pub fn cap_tokens(s: &str, max_tokens: usize) -> &str {
    let spans = text::whitespace_token_spans(s);
    if spans.len() <= max_tokens {
        return s;
    }
    let end = spans[max_tokens - 1].1;
    text::slice_chars(s, 0, end).unwrap_or(s)
}

/// A text-generation backend.
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn generate(
        &self,
        prompt: &str,
        max_tokens: usize,
    ) -> std::result::Result<String, ProviderError>;

    /// In-flight request limit the provider tolerates.
    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    /// Generates the situating context for one chunk. `prompt` has been
    /// validated by the caller.
    fn situate(
        &self,
        prompt: &ContextPrompt,
        doc: &Document,
        chunk: &Chunk,
    ) -> std::result::Result<String, ProviderError> {
        let text = build_prompt(prompt, doc, chunk).expect("validated prompt");
        self.generate(&text, prompt.max_context_tokens)
    }

    /// Answers `question` from already-assembled evidence. `evidence` is in
    /// rank order and non-empty.
    fn answer(
        &self,
        prompt: &str,
        evidence: &[String],
    ) -> std::result::Result<String, ProviderError> {
        let _ = evidence;
        self.generate(prompt, 256)
    }
}

/// Deterministic LLM stand-in.
///
/// Contexts follow [`mock_context`]; answers are the top-ranked evidence
/// verbatim; raw generation echoes the prompt's first sentence.
#[derive(Debug, Clone, Default)]
pub struct MockLlm;

impl LlmProvider for MockLlm {
    fn name(&self) -> &str {
        "mock-llm"
    }

    fn generate(
        &self,
        prompt: &str,
        max_tokens: usize,
    ) -> std::result::Result<String, ProviderError> {
        if max_tokens == 0 {
            return Ok(String::new());
        }
        Ok(cap_tokens(text::first_sentence(prompt), max_tokens).to_string())
    }

    fn situate(
        &self,
        _prompt: &ContextPrompt,
        doc: &Document,
        _chunk: &Chunk,
    ) -> std::result::Result<String, ProviderError> {
        Ok(mock_context(doc))
    }

    fn answer(
        &self,
        _prompt: &str,
        evidence: &[String],
    ) -> std::result::Result<String, ProviderError> {
        Ok(evidence.first().cloned().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextualizeOptions {
    pub retry: RetryPolicy,
    pub in_flight: usize,
}

impl Default for ContextualizeOptions {
    fn default() -> Self {
        ContextualizeOptions {
            retry: RetryPolicy::default(),
            in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Contextualized {
    pub chunks: Vec<Chunk>,
    pub warnings: Vec<Warning>,
}

impl Contextualized {
    pub fn degraded(&self) -> bool {
        self.warnings.iter().any(Warning::is_degradation)
    }
}

/// Runs context generation for the chunks of documents, bounded by an
/// in-flight limit.
pub struct Contextualizer<'a> {
    llm: &'a dyn LlmProvider,
    prompt: ContextPrompt,
    retry: RetryPolicy,
    pool: rayon::ThreadPool,
}

impl<'a> Contextualizer<'a> {
    pub fn new(
        llm: &'a dyn LlmProvider,
        prompt: ContextPrompt,
        opts: ContextualizeOptions,
    ) -> Result<Self> {
        prompt.validate()?;
        let threads = opts.in_flight.min(llm.max_concurrency()).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("contextualize-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot start contextualizer pool: {e}")))?;
        Ok(Contextualizer {
            llm,
            prompt,
            retry: opts.retry,
            pool,
        })
    }

    pub fn prompt(&self) -> &ContextPrompt {
        &self.prompt
    }

    /// Sets the context of every chunk. Spans and texts are left untouched;
    /// output order matches input order.
    pub fn contextualize(&self, doc: &Document, chunks: &[Chunk]) -> Result<Contextualized> {
        if let Some(c) = chunks.iter().find(|c| c.span.doc_id != doc.id) {
            return Err(Error::Validation(format!(
                "chunk of {} passed with document {}",
                c.span.doc_id, doc.id
            )));
        }
        let results: Vec<(Chunk, Option<Warning>)> = self.pool.install(|| {
            use rayon::prelude::*;
            chunks
                .par_iter()
                .map(|chunk| self.one(doc, chunk))
                .collect()
        });
        let mut out = Contextualized::default();
        for (chunk, warning) in results {
            out.chunks.push(chunk);
            out.warnings.extend(warning);
        }
        Ok(out)
    }

    fn one(&self, doc: &Document, chunk: &Chunk) -> (Chunk, Option<Warning>) {
        let mut chunk = chunk.clone();
        let degraded = |reason: String| Warning::DegradedContext {
            doc_id: doc.id.clone(),
            chunk_index: chunk.span.index,
            reason,
        };
        match self
            .retry
            .run(|| self.llm.situate(&self.prompt, doc, &chunk))
        {
            Ok(generated) => {
                let generated = cap_tokens(generated.trim(), self.prompt.max_context_tokens);
                if generated.is_empty() {
                    let w = degraded("empty generation, mock context used".into());
                    chunk.context = Some(
                        cap_tokens(&mock_context(doc), self.prompt.max_context_tokens).to_string(),
                    );
                    (chunk, Some(w))
                } else {
                    chunk.context = Some(generated.to_string());
                    (chunk, None)
                }
            }
            Err(e) => {
                let w = degraded(e.to_string());
                chunk.context = None;
                (chunk, Some(w))
            }
        }
    }
}

/// One-shot form of [`Contextualizer::contextualize`].
pub fn contextualize(
    llm: &dyn LlmProvider,
    doc: &Document,
    chunks: &[Chunk],
    prompt: &ContextPrompt,
) -> Result<Contextualized> {
    Contextualizer::new(llm, prompt.clone(), ContextualizeOptions::default())?
        .contextualize(doc, chunks)
}
