//! Dense retrieval: chunking, embedding, exact vector search and expansion of
//! chunk hits to whole documents.

mod chunk;
mod embed;
mod eval;
mod index;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::parallel::Execution;
use crate::tokenizer::{Tokenizer, TokenizerKind};

pub use chunk::{chunk_document, window_ranges, Chunk};
pub use embed::{
    embed_texts, EmbeddingConfig, EmbeddingProvider, HashingEmbedder, HttpEmbedder,
    DEFAULT_DIMENSION,
};
pub use eval::{evaluate_p_at_k, first_gold_rank, p_at_k_from_ranks, render_p_at_k, PAtKTable};
pub use index::{cosine_distance, hit_order, l2_distance, ChunkRef, Hit, VectorIndex};

pub const DEFAULT_CUTOFFS: [usize; 6] = [1, 5, 10, 30, 50, 100];

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding provider failed: {0}")]
    Embedding(String),
    #[error("record {0:?} has no summary, which summaries mode requires")]
    MissingSummary(String),
    #[error("hit refers to unknown document {0:?}")]
    UnresolvedChunk(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Every chunk of every full page is indexed.
    FullPages,
    /// One vector per record summary.
    #[default]
    Summaries,
}

impl RetrievalMode {
    fn code(self) -> u8 {
        match self {
            RetrievalMode::FullPages => 0,
            RetrievalMode::Summaries => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RetrievalMode::FullPages),
            1 => Some(RetrievalMode::Summaries),
            _ => None,
        }
    }

    /// Text returned for a matched record.
    pub fn payload(self, record: &CorpusRecord) -> &str {
        match self {
            RetrievalMode::FullPages => &record.full_content,
            RetrievalMode::Summaries => record.summary.as_deref().unwrap_or(&record.full_content),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub mode: RetrievalMode,
    pub max_chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub metric: Metric,
    pub tokenizer: TokenizerKind,
    pub embed_batch_size: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            mode: RetrievalMode::Summaries,
            max_chunk_tokens: 384,
            overlap_tokens: 50,
            metric: Metric::L2,
            tokenizer: TokenizerKind::default(),
            embed_batch_size: 64,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidConfig("k must be at least 1".into()));
        }
        if self.overlap_tokens >= self.max_chunk_tokens {
            return Err(RetrievalError::InvalidConfig(format!(
                "overlap_tokens ({}) must be below max_chunk_tokens ({})",
                self.overlap_tokens, self.max_chunk_tokens
            )));
        }
        Ok(())
    }
}

/// One retrieved document with the chunk hits that selected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_title: String,
    pub best_score: f32,
    /// `(seq_no, score)`, closest first.
    pub matched_chunks: Vec<(usize, f32)>,
    pub payload: String,
}

/// Embeds the records (or their chunks) and builds an index. Rows are laid
/// out by record order, then seq_no, whatever order the embeddings finish in.
pub fn build_index(
    records: &[CorpusRecord],
    config: &RetrievalConfig,
    provider: &dyn EmbeddingProvider,
    execution: Execution,
) -> Result<VectorIndex, RetrievalError> {
    config.validate()?;
    let tokenizer = config.tokenizer.build();
    let (refs, texts) = index_units(records, config, tokenizer.as_ref(), execution)?;
    let vectors = embed_texts(provider, &texts, config.embed_batch_size, execution)?;
    let mut index = VectorIndex::new(provider.dimension(), config.metric, config.mode);
    for (r, v) in refs.into_iter().zip(&vectors) {
        index.push(r, v)?;
    }
    log::info!(
        "indexed {} vectors from {} records ({:?})",
        index.len(),
        records.len(),
        config.mode
    );
    Ok(index)
}

/// The `(ref, text)` units that [`build_index`] embeds.
pub fn index_units(
    records: &[CorpusRecord],
    config: &RetrievalConfig,
    tokenizer: &dyn Tokenizer,
    execution: Execution,
) -> Result<(Vec<ChunkRef>, Vec<String>), RetrievalError> {
    let mut refs = Vec::new();
    let mut texts = Vec::new();
    match config.mode {
        RetrievalMode::Summaries => {
            for r in records {
                let summary = r
                    .summary
                    .as_ref()
                    .ok_or_else(|| RetrievalError::MissingSummary(r.title.clone()))?;
                let n = tokenizer.count_tokens(summary);
                if n > config.max_chunk_tokens {
                    log::warn!(
                        "summary of {:?} has {n} tokens, above the {} token window",
                        r.title,
                        config.max_chunk_tokens
                    );
                }
                refs.push(ChunkRef::new(r.title.clone(), 0));
                texts.push(summary.clone());
            }
        }
        RetrievalMode::FullPages => {
            let chunked = execution.map(records, |r| {
                chunk_document(
                    &r.title,
                    &r.full_content,
                    tokenizer,
                    config.max_chunk_tokens,
                    config.overlap_tokens,
                )
            });
            for chunks in chunked {
                for c in chunks? {
                    refs.push(ChunkRef::new(c.doc_title, c.seq_no));
                    texts.push(c.text);
                }
            }
        }
    }
    Ok((refs, texts))
}

/// Collapses chunk hits into one result per document carrying the whole
/// record payload, ordered by best score then title.
pub fn expand_to_full_documents(
    hits: &[Hit],
    records: &HashMap<String, CorpusRecord>,
    mode: RetrievalMode,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    let mut grouped: BTreeMap<&str, Vec<(usize, f32)>> = BTreeMap::new();
    for h in hits {
        grouped
            .entry(h.chunk.title.as_str())
            .or_default()
            .push((h.chunk.seq_no, h.score));
    }
    let mut results = Vec::with_capacity(grouped.len());
    for (title, mut chunks) in grouped {
        let record = records
            .get(title)
            .ok_or_else(|| RetrievalError::UnresolvedChunk(title.to_string()))?;
        chunks.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        results.push(RetrievalResult {
            doc_title: title.to_string(),
            best_score: chunks[0].1,
            matched_chunks: chunks,
            payload: mode.payload(record).to_string(),
        });
    }
    results.sort_by(|a, b| {
        a.best_score
            .total_cmp(&b.best_score)
            .then_with(|| a.doc_title.cmp(&b.doc_title))
    });
    Ok(results)
}

/// Context block shown to models: title, distance and payload per document,
/// blank-line separated, in ranking order.
pub fn render_context(results: &[RetrievalResult]) -> String {
    results
        .iter()
        .map(|r| {
            format!(
                "Title: {}\nSimilarity score: {:.4}\nContent: {}",
                r.doc_title, r.best_score, r.payload
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The retrieved titles as a JSON array, e.g. `["Flu", "Migraine"]`.
pub fn render_sources(results: &[RetrievalResult]) -> String {
    let titles: Vec<&str> = results.iter().map(|r| r.doc_title.as_str()).collect();
    serde_json::to_string(&titles).expect("titles serialise")
}

/// Anything that can answer a text query with ranked documents.
pub trait Retrieve: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalResult>, RetrievalError>;
}

/// A frozen index with the records and embedder needed to serve queries.
pub struct Retriever {
    index: VectorIndex,
    records: HashMap<String, CorpusRecord>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl Retriever {
    pub fn new(
        index: VectorIndex,
        records: Vec<CorpusRecord>,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, RetrievalError> {
        if provider.dimension() != index.dimension() {
            return Err(RetrievalError::DimensionMismatch {
                expected: index.dimension(),
                got: provider.dimension(),
            });
        }
        let records: HashMap<String, CorpusRecord> =
            records.into_iter().map(|r| (r.title.clone(), r)).collect();
        if let Some(r) = index.refs().iter().find(|r| !records.contains_key(&r.title)) {
            return Err(RetrievalError::UnresolvedChunk(r.title.clone()));
        }
        Ok(Self {
            index,
            records,
            provider,
        })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn records(&self) -> &HashMap<String, CorpusRecord> {
        &self.records
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    /// Raw chunk hits for a query.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        let v = self.provider.embed(&[query.to_string()])?;
        let v = v
            .first()
            .ok_or_else(|| RetrievalError::Embedding("no vector returned".into()))?;
        self.index.query_top_k(v, k)
    }
}

impl Retrieve for Retriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalResult>, RetrievalError> {
        let hits = self.search(query, k)?;
        expand_to_full_documents(&hits, &self.records, self.index.mode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(title: &str, text: &str) -> CorpusRecord {
        CorpusRecord::new(title, text).with_summary(format!("summary of {text}"))
    }

    fn record_map(recs: &[CorpusRecord]) -> HashMap<String, CorpusRecord> {
        recs.iter().map(|r| (r.title.clone(), r.clone())).collect()
    }

    fn hit(title: &str, seq: usize, score: f32) -> Hit {
        Hit {
            chunk: ChunkRef::new(title, seq),
            score,
        }
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig {
            overlap_tokens: 384,
            ..RetrievalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig {
            k: 0,
            ..RetrievalConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn summaries_mode_has_one_vector_per_record() {
        let recs = vec![rec("a", "x"), rec("b", "y"), rec("c", "z")];
        let idx = build_index(
            &recs,
            &RetrievalConfig::default(),
            &HashingEmbedder::new(32),
            Execution::Auto,
        )
        .unwrap();
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn summaries_mode_needs_summaries() {
        let recs = vec![rec("a", "x"), CorpusRecord::new("b", "y")];
        let err = build_index(
            &recs,
            &RetrievalConfig::default(),
            &HashingEmbedder::new(32),
            Execution::Auto,
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::MissingSummary(t) if t == "b"));
    }

    #[test]
    fn full_pages_layout_is_record_then_seq() {
        let long = (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let recs = vec![rec("z", &long), rec("a", "short text")];
        let config = RetrievalConfig {
            mode: RetrievalMode::FullPages,
            max_chunk_tokens: 10,
            overlap_tokens: 2,
            tokenizer: TokenizerKind::Whitespace,
            ..RetrievalConfig::default()
        };
        let idx = build_index(&recs, &config, &HashingEmbedder::new(16), Execution::Auto).unwrap();
        let refs: Vec<(&str, usize)> = idx
            .refs()
            .iter()
            .map(|r| (r.title.as_str(), r.seq_no))
            .collect();
        // 30 tokens, stride 8: windows at 0, 8, 16, 24
        assert_eq!(refs, vec![("z", 0), ("z", 1), ("z", 2), ("z", 3), ("a", 0)]);
    }

    #[test]
    fn expansion_orders_by_best_score() {
        let recs = vec![rec("A", "a"), rec("B", "b")];
        let hits = vec![hit("A", 0, 0.5), hit("B", 0, 0.2), hit("A", 1, 0.1)];
        let out = expand_to_full_documents(&hits, &record_map(&recs), RetrievalMode::FullPages)
            .unwrap();
        let titles: Vec<&str> = out.iter().map(|r| r.doc_title.as_str()).collect();
        assert_eq!(titles, ["A", "B"]);
        assert_eq!(out[0].matched_chunks, vec![(1, 0.1), (0, 0.5)]);
        assert_eq!(out[0].best_score, 0.1);
        assert_eq!(out[0].payload, "a");
    }

    #[test]
    fn expansion_dedups_and_uses_mode_payload() {
        let recs = vec![rec("A", "a")];
        let hits = vec![hit("A", 0, 0.3), hit("A", 1, 0.4)];
        let out = expand_to_full_documents(&hits, &record_map(&recs), RetrievalMode::Summaries)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].matched_chunks.len(), 2);
        assert_eq!(out[0].payload, "summary of a");
    }

    #[test]
    fn unresolved_hits_are_errors() {
        let err = expand_to_full_documents(
            &[hit("ghost", 0, 0.0)],
            &HashMap::new(),
            RetrievalMode::Summaries,
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::UnresolvedChunk(_)));
    }

    #[test]
    fn retriever_finds_the_verbatim_document() {
        let recs = vec![
            rec("Flu", "fever aches chills"),
            rec("Migraine", "throbbing headache light sensitivity"),
        ];
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(64));
        let idx = build_index(
            &recs,
            &RetrievalConfig::default(),
            provider.as_ref(),
            Execution::Sequential,
        )
        .unwrap();
        let r = Retriever::new(idx, recs, provider).unwrap();
        let out = r
            .retrieve("summary of throbbing headache light sensitivity", 1)
            .unwrap();
        assert_eq!(out[0].doc_title, "Migraine");
    }

    #[test]
    fn retriever_rejects_mismatched_provider() {
        let idx = VectorIndex::new(4, Metric::L2, RetrievalMode::Summaries);
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(8));
        assert!(Retriever::new(idx, vec![], provider).is_err());
    }
}
