//! Mechanical checks against the original data: verbatim chunk verification,
//! word-set Jaccard coverage, and coverage spans over each document.
//!
//! Everything here is a pure function over immutable inputs.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::ids::DocumentId;
use crate::model::{ChunkAssignment, SourceDocument};

/// Splits text into lowercase tokens on every non-alphanumeric run.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Set of normalized tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordSet {
    words: HashSet<String>,
}

impl WordSet {
    pub fn from_text(text: &str) -> Self {
        Self {
            words: tokenize(text).collect(),
        }
    }

    /// Word set of several text fragments, tokenized independently.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = HashSet::new();
        for text in texts {
            words.extend(tokenize(text));
        }
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn union_with(&mut self, other: &WordSet) {
        self.words.extend(other.words.iter().cloned());
    }
}

impl<S: Into<String>> FromIterator<S> for WordSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            words: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 1.0.
pub fn jaccard(a: &WordSet, b: &WordSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let intersection = small
        .words
        .iter()
        .filter(|w| large.words.contains(*w))
        .count();
    let union = a.len() + b.len() - intersection;
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// How chunk text and document text are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub collapse_whitespace: bool,
    pub case_insensitive: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            collapse_whitespace: true,
            case_insensitive: false,
        }
    }
}

impl Normalization {
    pub const STRICT: Normalization = Normalization {
        collapse_whitespace: false,
        case_insensitive: false,
    };

    pub fn apply(&self, text: &str) -> Vec<char> {
        let mut out = Vec::with_capacity(text.len());
        let mut in_space = false;
        for c in text.chars() {
            if self.collapse_whitespace && c.is_whitespace() {
                if !in_space {
                    out.push(' ');
                }
                in_space = true;
                continue;
            }
            in_space = false;
            if self.case_insensitive {
                out.extend(c.to_lowercase());
            } else {
                out.push(c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbatimViolation {
    /// First divergent position, in characters of the normalized chunk text.
    pub position: usize,
    pub expected: Option<char>,
    pub found: Option<char>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpanError {
    #[error("span {start}..{end} is out of bounds for a document of {len} characters")]
    OutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("span {start}..{end} is empty or reversed")]
    Empty { start: usize, end: usize },
}

/// Character-indexed slice of `text`.
pub fn char_slice(text: &str, start: usize, end: usize) -> Result<&str, SpanError> {
    if start >= end {
        return Err(SpanError::Empty { start, end });
    }
    let mut indices = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()));
    let begin = indices.nth(start);
    let finish = begin.and_then(|_| indices.nth(end - start - 1));
    match (begin, finish) {
        (Some(b), Some(e)) => Ok(&text[b..e]),
        _ => Err(SpanError::OutOfBounds {
            start,
            end,
            len: text.chars().count(),
        }),
    }
}

/// Checks `text` against `body[start..end]` under `normalization`.
pub fn verify_span(
    body: &str,
    start: usize,
    end: usize,
    text: &str,
    normalization: Normalization,
) -> Result<Result<(), VerbatimViolation>, SpanError> {
    let expected = normalization.apply(char_slice(body, start, end)?);
    let found = normalization.apply(text);
    let diverge = expected
        .iter()
        .zip(found.iter())
        .position(|(a, b)| a != b)
        .or_else(|| (expected.len() != found.len()).then(|| expected.len().min(found.len())));
    Ok(match diverge {
        None => Ok(()),
        Some(position) => Err(VerbatimViolation {
            position,
            expected: expected.get(position).copied(),
            found: found.get(position).copied(),
        }),
    })
}

/// Checks that a chunk's text is the verbatim content of its document span,
/// using the default whitespace-collapsing normalization.
pub fn verify_verbatim(
    document: &SourceDocument,
    chunk: &ChunkAssignment,
) -> Result<Result<(), VerbatimViolation>, SpanError> {
    verify_span(
        &document.body,
        chunk.start_offset,
        chunk.end_offset,
        &chunk.text,
        Normalization::default(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocateError {
    /// The text does not occur in the document.
    NotFound,
    /// Every occurrence overlaps a span that is already taken.
    Overlapping,
}

/// Whitespace-collapsed view of a document with a map back to original
/// character offsets.
pub struct NormalizedDocument {
    text: String,
    /// For each char of `text`: (byte offset in `text`, original char index).
    positions: Vec<(usize, usize)>,
}

impl NormalizedDocument {
    pub fn new(body: &str) -> Self {
        let mut text = String::with_capacity(body.len());
        let mut positions = Vec::with_capacity(body.len());
        let mut in_space = false;
        for (idx, c) in body.chars().enumerate() {
            if c.is_whitespace() {
                if !in_space {
                    positions.push((text.len(), idx));
                    text.push(' ');
                }
                in_space = true;
            } else {
                positions.push((text.len(), idx));
                text.push(c);
                in_space = false;
            }
        }
        Self { text, positions }
    }

    /// Finds the first occurrence of `needle` (whitespace-normalized, trimmed)
    /// whose original span does not overlap any span in `taken`.
    ///
    /// Returns the original half-open character span.
    pub fn locate(
        &self,
        needle: &str,
        taken: &[(usize, usize)],
    ) -> Result<(usize, usize), LocateError> {
        let needle: String = Normalization::default()
            .apply(needle.trim())
            .into_iter()
            .collect();
        if needle.is_empty() {
            return Err(LocateError::NotFound);
        }
        let needle_chars = needle.chars().count();
        let mut found_any = false;
        let mut from = 0;
        while let Some(rel) = self.text[from..].find(&needle) {
            let byte = from + rel;
            let first = self
                .positions
                .binary_search_by_key(&byte, |p| p.0)
                .expect("match starts on a char boundary");
            let last = first + needle_chars - 1;
            let start = self.positions[first].1;
            let end = self.positions[last].1 + 1;
            found_any = true;
            if !taken.iter().any(|&(s, e)| s < end && start < e) {
                return Ok((start, end));
            }
            from = byte + self.text[byte..].chars().next().map_or(1, char::len_utf8);
        }
        Err(if found_any {
            LocateError::Overlapping
        } else {
            LocateError::NotFound
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentCoverage {
    pub document_id: DocumentId,
    pub jaccard: f64,
    pub covered_spans: Vec<Span>,
    pub uncovered_spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_document: Vec<DocumentCoverage>,
    pub overall_jaccard: f64,
}

impl CoverageReport {
    pub fn document(&self, id: &DocumentId) -> Option<&DocumentCoverage> {
        self.per_document.iter().find(|d| &d.document_id == id)
    }
}

/// Text → codes coverage: Jaccard between each document's word set and the
/// word set of its chunks, plus covered/uncovered spans tiling each body.
pub fn compute_coverage(
    documents: &[SourceDocument],
    chunks: &[ChunkAssignment],
) -> CoverageReport {
    let mut all_doc_words = WordSet::default();
    let mut all_chunk_words = WordSet::default();
    let mut per_document = Vec::with_capacity(documents.len());

    for doc in documents {
        let mut spans: Vec<Span> = chunks
            .iter()
            .filter(|c| c.document_id == doc.id)
            .map(|c| Span {
                start: c.start_offset,
                end: c.end_offset,
            })
            .collect();
        spans.sort_by_key(|s| (s.start, s.end));

        let doc_words = WordSet::from_text(&doc.body);
        let chunk_words = WordSet::from_texts(
            chunks
                .iter()
                .filter(|c| c.document_id == doc.id)
                .map(|c| c.text.as_str()),
        );
        let (covered_spans, uncovered_spans) = tile(spans, doc.char_len());
        per_document.push(DocumentCoverage {
            document_id: doc.id.clone(),
            jaccard: jaccard(&doc_words, &chunk_words),
            covered_spans,
            uncovered_spans,
        });
        all_doc_words.union_with(&doc_words);
        all_chunk_words.union_with(&chunk_words);
    }

    CoverageReport {
        per_document,
        overall_jaccard: jaccard(&all_doc_words, &all_chunk_words),
    }
}

/// Merges overlapping spans and fills the gaps so the result tiles `0..len`.
fn tile(sorted: Vec<Span>, len: usize) -> (Vec<Span>, Vec<Span>) {
    let mut covered: Vec<Span> = Vec::with_capacity(sorted.len());
    for span in sorted {
        let span = Span {
            start: span.start.min(len),
            end: span.end.min(len),
        };
        if span.is_empty() {
            continue;
        }
        match covered.last_mut() {
            Some(prev) if span.start < prev.end => prev.end = prev.end.max(span.end),
            _ => covered.push(span),
        }
    }
    let mut uncovered = Vec::new();
    let mut cursor = 0;
    for span in &covered {
        if span.start > cursor {
            uncovered.push(Span {
                start: cursor,
                end: span.start,
            });
        }
        cursor = span.end;
    }
    if cursor < len {
        uncovered.push(Span {
            start: cursor,
            end: len,
        });
    }
    (covered, uncovered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{ChunkId, CodeId};

    fn set(words: &[&str]) -> WordSet {
        words.iter().copied().collect()
    }

    fn chunk(doc: &SourceDocument, start: usize, end: usize, text: &str) -> ChunkAssignment {
        ChunkAssignment {
            chunk_id: ChunkId::from("chunk-1"),
            document_id: doc.id.clone(),
            start_offset: start,
            end_offset: end,
            text: text.to_owned(),
            code_id: CodeId::from("code-1"),
        }
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&["a", "b", "c"]), &set(&["a", "b", "c"])), 1.0);
        assert_eq!(jaccard(&set(&["a", "b", "c"]), &set(&["d", "e", "f"])), 0.0);
        // |∩| = 2 (cat, sat), |∪| = 4
        assert_eq!(
            jaccard(&set(&["the", "cat", "sat"]), &set(&["cat", "sat", "mat"])),
            0.5
        );
        assert_eq!(jaccard(&WordSet::default(), &WordSet::default()), 1.0);
        assert_eq!(jaccard(&set(&["a"]), &WordSet::default()), 0.0);
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        let tokens: Vec<_> = tokenize("Hello, WORLD!  it's 2nd-rate...").collect();
        assert_eq!(tokens, ["hello", "world", "it", "s", "2nd", "rate"]);
        assert_eq!(tokenize("  ... ").count(), 0);
    }

    #[test]
    fn verbatim_examples() {
        let doc = SourceDocument::new("d1", "t", "alpha beta");
        assert_eq!(
            verify_verbatim(&doc, &chunk(&doc, 0, 5, "alpha")),
            Ok(Ok(()))
        );

        let strict = verify_span("alpha beta", 0, 5, "Alpha", Normalization::default()).unwrap();
        assert_eq!(strict.unwrap_err().position, 0);

        let folded = Normalization {
            case_insensitive: true,
            ..Normalization::default()
        };
        assert_eq!(verify_span("alpha beta", 0, 5, "Alpha", folded), Ok(Ok(())));
    }

    #[test]
    fn verbatim_tolerates_rewrapping_only() {
        let body = "one two\n   three";
        assert_eq!(
            verify_span(body, 0, 16, "one two three", Normalization::default()),
            Ok(Ok(()))
        );
        let err = verify_span(body, 0, 16, "one two three", Normalization::STRICT).unwrap();
        assert_eq!(err.unwrap_err().position, 7);
        let err = verify_span(body, 0, 16, "one two thre", Normalization::default()).unwrap();
        assert_eq!(err.unwrap_err().position, 12);
    }

    #[test]
    fn out_of_bounds_span_is_an_error() {
        assert!(matches!(
            verify_span("abc", 1, 9, "bc", Normalization::default()),
            Err(SpanError::OutOfBounds { len: 3, .. })
        ));
        assert!(matches!(
            verify_span("abc", 2, 2, "", Normalization::default()),
            Err(SpanError::Empty { .. })
        ));
    }

    #[test]
    fn char_slice_handles_multibyte_text() {
        let body = "café \u{2014} naïve";
        assert_eq!(char_slice(body, 0, 4).unwrap(), "café");
        assert_eq!(char_slice(body, 7, 12).unwrap(), "naïve");
        assert!(char_slice(body, 7, 13).is_err());
    }

    #[test]
    fn locate_skips_taken_occurrences() {
        let doc = NormalizedDocument::new("Yes. No.\n\nYes.  Maybe");
        assert_eq!(doc.locate("Yes.", &[]), Ok((0, 4)));
        assert_eq!(doc.locate("Yes.", &[(0, 4)]), Ok((10, 14)));
        assert_eq!(
            doc.locate("Yes.", &[(0, 4), (10, 14)]),
            Err(LocateError::Overlapping)
        );
        assert_eq!(doc.locate("No. Yes.", &[]), Ok((5, 14)));
        assert_eq!(doc.locate("Nope", &[]), Err(LocateError::NotFound));
        assert_eq!(doc.locate("   ", &[]), Err(LocateError::NotFound));
    }

    #[test]
    fn coverage_of_half_covered_document() {
        let doc = SourceDocument::new("d1", "t", "w1 w2 w3 w4");
        // doc words {w1..w4}, chunk words {w1, w2}: 2 / 4
        let report = compute_coverage(std::slice::from_ref(&doc), &[chunk(&doc, 0, 5, "w1 w2")]);
        let d = &report.per_document[0];
        assert_eq!(d.jaccard, 0.5);
        assert_eq!(d.covered_spans, [Span { start: 0, end: 5 }]);
        assert_eq!(d.uncovered_spans, [Span { start: 5, end: 11 }]);
        assert_eq!(report.overall_jaccard, 0.5);
    }

    #[test]
    fn coverage_of_fully_tiled_document() {
        let doc = SourceDocument::new("d1", "t", "ab cd");
        let chunks = [chunk(&doc, 0, 3, "ab "), chunk(&doc, 3, 5, "cd")];
        let report = compute_coverage(std::slice::from_ref(&doc), &chunks);
        assert_eq!(report.per_document[0].jaccard, 1.0);
        assert!(report.per_document[0].uncovered_spans.is_empty());
    }

    #[test]
    fn coverage_without_chunks_is_zero() {
        let doc = SourceDocument::new("d1", "t", "some words");
        let report = compute_coverage(std::slice::from_ref(&doc), &[]);
        assert_eq!(report.overall_jaccard, 0.0);
        assert_eq!(
            report.per_document[0].uncovered_spans,
            [Span { start: 0, end: 10 }]
        );
    }
}
