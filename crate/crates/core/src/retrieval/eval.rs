use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::parallel::Execution;

use super::{embed_texts, EmbeddingProvider, Hit, RetrievalError, VectorIndex};

/// Fraction of queries whose gold document is within each cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PAtKTable {
    pub cutoffs: Vec<usize>,
    pub values: BTreeMap<usize, f64>,
    pub query_count: usize,
}

impl PAtKTable {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.values.get(&k).copied()
    }
}

/// Position (0-based) of the first hit belonging to `gold`, if any.
///
/// Hits are chunk-level, so "gold within the top-k entries" is exactly
/// "first gold rank < k" whether or not documents repeat.
pub fn first_gold_rank(hits: &[Hit], gold: &str) -> Option<usize> {
    hits.iter().position(|h| h.chunk.title == gold)
}

/// Builds the table from per-query first-gold ranks.
pub fn p_at_k_from_ranks(ranks: &[Option<usize>], cutoffs: &[usize]) -> PAtKTable {
    let mut cutoffs = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let n = ranks.len();
    let values = cutoffs
        .iter()
        .map(|&k| {
            let found = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            let frac = if n == 0 { 0.0 } else { found as f64 / n as f64 };
            (k, frac)
        })
        .collect();
    PAtKTable {
        cutoffs,
        values,
        query_count: n,
    }
}

/// Embeds every query, searches to the largest cutoff and reports p@k for
/// each cutoff. `queries` holds `(query_text, gold_title)` pairs.
pub fn evaluate_p_at_k(
    index: &VectorIndex,
    queries: &[(String, String)],
    cutoffs: &[usize],
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
    execution: Execution,
) -> Result<PAtKTable, RetrievalError> {
    if cutoffs.contains(&0) {
        return Err(RetrievalError::InvalidConfig("cutoffs must be at least 1".into()));
    }
    let max_k = cutoffs.iter().copied().max().unwrap_or(0);
    let texts: Vec<String> = queries.iter().map(|(q, _)| q.clone()).collect();
    let vectors = embed_texts(provider, &texts, batch_size, execution)?;
    let hits = index.query_batch(&vectors, max_k, execution)?;
    let ranks: Vec<Option<usize>> = hits
        .iter()
        .zip(queries)
        .map(|(h, (_, gold))| first_gold_rank(h, gold))
        .collect();
    if queries.is_empty() {
        log::warn!("p@k evaluated on an empty query set");
    }
    Ok(p_at_k_from_ranks(&ranks, cutoffs))
}

/// Plain-text table with one column per cutoff.
pub fn render_p_at_k(rows: &[(&str, usize, &PAtKTable)]) -> String {
    let cutoffs: Vec<usize> = rows
        .first()
        .map(|(_, _, t)| t.cutoffs.clone())
        .unwrap_or_default();
    let mut out = format!("{:<12} {:>8}", "Method", "Entries");
    for k in &cutoffs {
        out.push_str(&format!(" {:>6}", format!("p@{k}")));
    }
    out.push('\n');
    for (label, entries, table) in rows {
        out.push_str(&format!("{label:<12} {entries:>8}"));
        for k in &cutoffs {
            match table.get(*k) {
                Some(v) => out.push_str(&format!(" {v:>6.2}")),
                None => out.push_str(&format!(" {:>6}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
