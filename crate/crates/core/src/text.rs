//! Character-offset helpers, sentence boundaries and the lexical tokenizer
//! shared by BM25 indexing and the mock reranker.
//!
//! All offsets in this crate count Unicode scalar values, not bytes.

use serde::{Deserialize, Serialize};

/// Number of chars in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Slice `text` by char offsets `[start, end)`. Returns `None` when the range
/// is inverted or runs past the end of the text.
pub fn slice_chars(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut boundaries = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()));
    let start_byte = boundaries.nth(start)?;
    let end_byte = if end == start {
        start_byte
    } else {
        boundaries.nth(end - start - 1)?
    };
    Some(&text[start_byte..end_byte])
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Char offsets at which sentences end.
///
/// A sentence ends at a `.`, `!` or `?` that is followed by whitespace; the
/// terminator and the whole following whitespace run belong to the sentence
/// they close. The returned offsets are exclusive ends, strictly increasing,
/// and the text length is always the final entry for non-empty text.
pub fn sentence_ends(text: &str) -> Vec<usize> {
    let chars: Vec<char> = text.chars().collect();
    let mut ends = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if is_terminator(chars[i]) && chars.get(i + 1).is_some_and(|c| c.is_whitespace()) {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j < chars.len() {
                ends.push(j);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    if !chars.is_empty() {
        ends.push(chars.len());
    }
    ends
}

/// The first sentence of `text`, with surrounding whitespace trimmed.
pub fn first_sentence(text: &str) -> &str {
    let end = sentence_ends(text).first().copied().unwrap_or(0);
    slice_chars(text, 0, end).unwrap_or(text).trim()
}

/// Char spans of maximal non-whitespace runs.
pub fn whitespace_token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        spans.push((s, n));
    }
    spans
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "if", "in", "into", "is", "it",
    "no", "not", "of", "on", "or", "such", "that", "the", "their", "then", "there", "these",
    "they", "this", "to", "was", "will", "with",
];

/// Lexical tokenizer: lowercase, split on every non-alphanumeric run.
///
/// Stopword removal and a light plural stemmer are available but off by
/// default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexicalTokenizer {
    pub stopwords: bool,
    pub stem: bool,
}

impl LexicalTokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .filter(|t| !(self.stopwords && STOPWORDS.contains(&t.as_str())))
            .map(|t| if self.stem { stem_plural(&t) } else { t })
            .collect()
    }
}

/// Harman's "S" stemmer, minimal form.
fn stem_plural(term: &str) -> String {
    let b = term.as_bytes();
    let n = b.len();
    if n < 3 || b[n - 1] != b's' {
        return term.to_string();
    }
    match b[n - 2] {
        b'u' | b's' => term.to_string(),
        b'e' if n > 3 && b[n - 3] == b'i' && b[n - 4] != b'a' && b[n - 4] != b'e' => {
            format!("{}y", &term[..n - 3])
        }
        b'e' if matches!(b[n - 3], b'i' | b'a' | b'o' | b'e') => term.to_string(),
        _ => term[..n - 1].to_string(),
    }
}
