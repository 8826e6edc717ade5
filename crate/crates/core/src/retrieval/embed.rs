use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::gateway::{redact, GatewayError, RetryPolicy};
use crate::parallel::Execution;

use super::RetrievalError;

pub const DEFAULT_DIMENSION: usize = 768;

/// Batch text-in, vectors-out embedding model with a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError>;
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        (**self).embed(texts)
    }
}

/// Embeds `texts` in batches of `batch_size`, checking count and dimension of
/// every returned vector. Output order matches input order.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    batch_size: usize,
    execution: Execution,
) -> Result<Vec<Vec<f32>>, RetrievalError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let dim = provider.dimension();
    let batches: Vec<&[String]> = texts.chunks(batch_size.max(1)).collect();
    let results = execution.map(&batches, |batch| {
        let vectors = provider.embed(batch)?;
        if vectors.len() != batch.len() {
            return Err(RetrievalError::Embedding(format!(
                "provider returned {} vectors for {} texts",
                vectors.len(),
                batch.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(RetrievalError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        Ok(vectors)
    });
    let mut out = Vec::with_capacity(texts.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Offline embedder: hashed bag of lowercase word unigrams and bigrams,
/// L2-normalised. Deterministic and dependency free, so it suits tests and
/// air-gapped smoke runs, but it is only a lexical similarity.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dimension];
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut add = |feature: &[&str]| {
            let h = fnv1a(feature);
            let idx = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        };
        for (i, w) in words.iter().enumerate() {
            add(&[w]);
            if let Some(next) = words.get(i + 1) {
                add(&[w, next]);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(0x100000001b3);
        }
        for b in p.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Settings for an embedding service speaking `POST /embed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub base_url: String,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

fn default_batch() -> usize {
    64
}

fn default_timeout() -> u64 {
    120
}

impl EmbeddingConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            dimension: DEFAULT_DIMENSION,
            batch_size: default_batch(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

pub struct HttpEmbedder {
    config: EmbeddingConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: EmbeddingConfig) -> Result<Self, RetrievalError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                RetrievalError::Embedding(GatewayError::MissingCredential(var.clone()).to_string())
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        let url = format!("{}/embed", self.config.base_url.trim_end_matches('/'));
        let body = json!({ "texts": texts });
        let parsed: EmbedResponse = self
            .config
            .retry
            .run(
                |_| {
                    let mut req = self.client.post(&url).json(&body);
                    if let Some(key) = &self.api_key {
                        req = req.bearer_auth(key);
                    }
                    let resp = req
                        .send()
                        .map_err(|e| GatewayError::Transport(e.to_string()))?;
                    let status = resp.status();
                    let text = resp
                        .text()
                        .map_err(|e| GatewayError::Transport(e.to_string()))?;
                    if !status.is_success() {
                        return Err(GatewayError::Status {
                            status: status.as_u16(),
                            body: redact(&text, self.api_key.as_deref()),
                        });
                    }
                    serde_json::from_str(&text).map_err(|e| GatewayError::Schema(e.to_string()))
                },
                GatewayError::is_transient,
            )
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        Ok(parsed.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;
    impl EmbeddingProvider for Broken {
        fn dimension(&self) -> usize {
            3
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
            Ok(texts.iter().map(|_| vec![0.0; 2]).collect())
        }
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let e = HashingEmbedder::default();
        assert!(embed_texts(&e, &[], 8, Execution::Auto).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_default_dimension() {
        let e = HashingEmbedder::default();
        let texts = vec!["sore throat".to_string(), "sore throat".to_string()];
        let v = embed_texts(&e, &texts, 1, Execution::Auto).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].len(), 768);
        let norm: f32 = v[0].iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = embed_texts(&Broken, &["a".to_string()], 4, Execution::Sequential).unwrap_err();
        assert!(matches!(
            err,
            RetrievalError::DimensionMismatch {
                expected: 3,
                got: 2
            }
        ));
    }

    #[test]
    fn batching_preserves_order() {
        let e = HashingEmbedder::new(16);
        let texts: Vec<String> = (0..10).map(|i| format!("text {i}")).collect();
        let batched = embed_texts(&e, &texts, 3, Execution::with_width(4)).unwrap();
        let single: Vec<_> = texts.iter().map(|t| e.embed_one(t)).collect();
        assert_eq!(batched, single);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        assert!(HashingEmbedder::new(8).embed_one("").iter().all(|x| *x == 0.0));
    }
}
