//! Splitting documents into contiguous character spans.
//!
//! Both strategies tile the text exactly: the spans of a document are sorted,
//! non-overlapping and leave no gaps, so concatenating the chunk texts
//! reproduces the document.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::text;

/// Separator placed between a generated context and the chunk text.
pub const CONTEXT_SEPARATOR: &str = "\n\n";

pub const DEFAULT_WINDOW_CHARS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub doc_id: String,
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl ChunkSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub span: ChunkSpan,
    pub text: String,
    /// Generated situating context. `None` for uncontextualized chunks.
    pub context: Option<String>,
}

impl Chunk {
    /// The text that gets embedded, indexed and shown to the reranker:
    /// `context + "\n\n" + text` when a context is present.
    pub fn indexed_text(&self) -> String {
        match &self.context {
            Some(ctx) => format!("{ctx}{CONTEXT_SEPARATOR}{}", self.text),
            None => self.text.clone(),
        }
    }

    pub fn is_contextualized(&self) -> bool {
        self.context.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    FixedWindow,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub strategy: Strategy,
    pub window_chars: usize,
    pub max_chunk_chars: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            strategy: Strategy::FixedWindow,
            window_chars: DEFAULT_WINDOW_CHARS,
            max_chunk_chars: DEFAULT_WINDOW_CHARS,
        }
    }
}

impl SegmenterConfig {
    pub fn fixed(window_chars: usize) -> Self {
        SegmenterConfig {
            strategy: Strategy::FixedWindow,
            window_chars,
            ..Default::default()
        }
    }

    pub fn semantic(max_chunk_chars: usize) -> Self {
        SegmenterConfig {
            strategy: Strategy::Semantic,
            max_chunk_chars,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::FixedWindow if self.window_chars == 0 => {
                Err(Error::Config("window_chars must be > 0".into()))
            }
            Strategy::Semantic if self.max_chunk_chars == 0 => {
                Err(Error::Config("max_chunk_chars must be > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Equal-sized windows of `window_chars` chars; the last one may be shorter.
pub fn segment_fixed(text: &str, window_chars: usize) -> Result<Vec<Range<usize>>> {
    if window_chars == 0 {
        return Err(Error::Argument("window_chars must be > 0".into()));
    }
    let len = text::char_len(text);
    if len == 0 {
        return Err(Error::Argument("cannot segment empty text".into()));
    }
    Ok((0..len)
        .step_by(window_chars)
        .map(|start| start..(start + window_chars).min(len))
        .collect())
}

/// Sentences greedily packed into chunks of at most `max_chunk_chars`.
///
/// A sentence longer than the limit is hard-split at multiples of the limit;
/// its remainder may still be packed together with following sentences.
/// Whitespace-only pieces are merged into a neighbour when the merge stays
/// within the limit.
pub fn segment_semantic(text: &str, max_chunk_chars: usize) -> Result<Vec<Range<usize>>> {
    if max_chunk_chars == 0 {
        return Err(Error::Argument("max_chunk_chars must be > 0".into()));
    }
    if text.is_empty() {
        return Err(Error::Argument("cannot segment empty text".into()));
    }

    let mut spans = Vec::new();
    let mut start = 0;
    let mut end = 0;
    for sentence_end in text::sentence_ends(text) {
        if sentence_end - start > max_chunk_chars {
            if end > start {
                spans.push(start..end);
                start = end;
            }
            while sentence_end - start > max_chunk_chars {
                spans.push(start..start + max_chunk_chars);
                start += max_chunk_chars;
            }
        }
        end = sentence_end;
    }
    if end > start {
        spans.push(start..end);
    }

    merge_blank_spans(text, &mut spans, max_chunk_chars);
    Ok(spans)
}

fn merge_blank_spans(text: &str, spans: &mut Vec<Range<usize>>, max_len: usize) {
    let chars: Vec<char> = text.chars().collect();
    let is_blank = |r: &Range<usize>| chars[r.clone()].iter().all(|c| c.is_whitespace());
    let mut i = 0;
    while i < spans.len() {
        if spans.len() > 1 && is_blank(&spans[i]) {
            if i > 0 && spans[i].end - spans[i - 1].start <= max_len {
                spans[i - 1].end = spans[i].end;
                spans.remove(i);
                continue;
            }
            if i + 1 < spans.len() && spans[i + 1].end - spans[i].start <= max_len {
                spans[i + 1].start = spans[i].start;
                spans.remove(i);
                continue;
            }
        }
        i += 1;
    }
}

/// Segments one document according to `cfg`.
pub fn segment(doc: &Document, cfg: &SegmenterConfig) -> Result<Vec<ChunkSpan>> {
    cfg.validate()?;
    let ranges = match cfg.strategy {
        Strategy::FixedWindow => segment_fixed(&doc.text, cfg.window_chars)?,
        Strategy::Semantic => segment_semantic(&doc.text, cfg.max_chunk_chars)?,
    };
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(index, r)| ChunkSpan {
            doc_id: doc.id.clone(),
            index,
            start: r.start,
            end: r.end,
        })
        .collect())
}

/// Checks that `spans` are sorted, non-empty and tile `[0, len)` exactly.
pub fn check_tiling(spans: &[ChunkSpan], len: usize) -> Result<()> {
    let mut cursor = 0;
    for span in spans {
        if span.start != cursor || span.end <= span.start {
            return Err(Error::Validation(format!(
                "spans of {} do not tile the text at offset {cursor}",
                span.doc_id
            )));
        }
        cursor = span.end;
    }
    if cursor != len {
        return Err(Error::Validation(format!(
            "spans cover [0, {cursor}) but the text has {len} chars"
        )));
    }
    Ok(())
}

/// Cuts the chunk texts out of `doc`. Context fields start empty.
pub fn slice_chunks(doc: &Document, spans: &[ChunkSpan]) -> Result<Vec<Chunk>> {
    let boundaries: Vec<usize> = doc
        .text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(doc.text.len()))
        .collect();
    let len = boundaries.len() - 1;
    spans
        .iter()
        .map(|span| {
            if span.start > span.end || span.end > len {
                return Err(Error::Bounds {
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            Ok(Chunk {
                span: span.clone(),
                text: doc.text[boundaries[span.start]..boundaries[span.end]].to_string(),
                context: None,
            })
        })
        .collect()
}
