//! Pluggable token counting.
//!
//! A tokenizer reports byte spans into the source text. Chunking uses the spans
//! to cut text at token boundaries; everything else only needs the count.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub trait Tokenizer: Send + Sync {
    /// Byte ranges of each token, ascending and non-overlapping.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count_tokens(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    spans.push(s..i);
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Approximates subword tokenizers: alphanumeric runs are cut into pieces of at
/// most `max_piece_chars` characters and every other visible character is a
/// token of its own. Close to BPE counts on English prose without shipping a
/// vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct ApproxSubwordTokenizer {
    pub max_piece_chars: usize,
}

impl Default for ApproxSubwordTokenizer {
    fn default() -> Self {
        Self { max_piece_chars: 4 }
    }
}

impl Tokenizer for ApproxSubwordTokenizer {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let max = self.max_piece_chars.max(1);
        let mut spans = Vec::new();
        let mut piece: Option<(usize, usize)> = None; // (start byte, chars so far)
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                match piece {
                    Some((s, n)) if n < max => piece = Some((s, n + 1)),
                    Some((s, _)) => {
                        spans.push(s..i);
                        piece = Some((i, 1));
                    }
                    None => piece = Some((i, 1)),
                }
                continue;
            }
            if let Some((s, _)) = piece.take() {
                spans.push(s..i);
            }
            if !c.is_whitespace() {
                spans.push(i..i + c.len_utf8());
            }
        }
        if let Some((s, _)) = piece {
            spans.push(s..text.len());
        }
        spans
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Whitespace,
    #[default]
    ApproxSubword,
}

impl TokenizerKind {
    pub fn build(self) -> Arc<dyn Tokenizer> {
        match self {
            TokenizerKind::Whitespace => Arc::new(WhitespaceTokenizer),
            TokenizerKind::ApproxSubword => Arc::new(ApproxSubwordTokenizer::default()),
        }
    }
}
