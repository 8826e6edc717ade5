use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Tokenizer;

use super::RetrievalError;

/// A token-bounded window of one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_title: String,
    pub seq_no: usize,
    pub text: String,
    pub token_count: usize,
}

/// Token index ranges of the windows covering `n_tokens` tokens.
///
/// Windows start every `max_tokens - overlap` tokens; consecutive windows
/// share exactly `overlap` tokens and the last one may be shorter.
pub fn window_ranges(
    n_tokens: usize,
    max_tokens: usize,
    overlap: usize,
) -> Result<Vec<Range<usize>>, RetrievalError> {
    if max_tokens == 0 || overlap >= max_tokens {
        return Err(RetrievalError::InvalidConfig(format!(
            "need max_tokens > overlap (got {max_tokens} and {overlap})"
        )));
    }
    let stride = max_tokens - overlap;
    let mut windows = Vec::new();
    let mut start = 0;
    while start < n_tokens {
        let end = (start + max_tokens).min(n_tokens);
        windows.push(start..end);
        if end == n_tokens {
            break;
        }
        start += stride;
    }
    Ok(windows)
}

/// Splits `text` into overlapping token windows. Chunk text is the source
/// slice from the first token's start to the last token's end.
pub fn chunk_document(
    doc_title: &str,
    text: &str,
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
    overlap: usize,
) -> Result<Vec<Chunk>, RetrievalError> {
    let spans = tokenizer.token_spans(text);
    let windows = window_ranges(spans.len(), max_tokens, overlap)?;
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(seq_no, w)| Chunk {
            doc_title: doc_title.to_string(),
            seq_no,
            text: text[spans[w.start].start..spans[w.end - 1].end].to_string(),
            token_count: w.len(),
        })
        .collect())
}
