//! The single TOML configuration file. API keys never live here: endpoint
//! sections name the environment variable to read instead.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use leanrag_core::gateway::{ChatEndpoint, EndpointConfig, HttpEndpoint};
use leanrag_core::orchestrator::TrimPolicy;
use leanrag_core::retrieval::{
    EmbeddingConfig, EmbeddingProvider, HashingEmbedder, HttpEmbedder, RetrievalConfig,
    DEFAULT_DIMENSION,
};
use leanrag_core::traces::TrainingConfig;
use leanrag_core::Execution;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub endpoints: Endpoints,
    pub embedding: EmbeddingSettings,
    pub retrieval: RetrievalConfig,
    pub trim: TrimPolicy,
    pub server: ServerConfig,
    pub parallelism: Parallelism,
    pub training: TrainingConfig,
}

/// One optional section per model role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    /// Decides between replying and calling the retriever in chat.
    pub agent: Option<EndpointConfig>,
    /// Answers with retrieved context, in chat and in evaluation.
    pub reasoner: Option<EndpointConfig>,
    /// Writes reasoning traces for fine-tuning.
    pub teacher: Option<EndpointConfig>,
    pub summariser: Option<EndpointConfig>,
    /// Writes synthetic patient queries.
    pub generator: Option<EndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum EmbeddingSettings {
    Http(EmbeddingConfig),
    /// Offline lexical hashing; no service needed.
    Hashing {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings::Hashing {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    /// Thread snapshot file; threads are kept in memory only when unset.
    pub store: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            corpus: None,
            index: None,
            store: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parallelism {
    /// Concurrent endpoint calls and search workers. 0 picks the rayon
    /// default, 1 runs everything on the calling thread.
    pub workers: usize,
}

impl Default for Parallelism {
    fn default() -> Self {
        Self { workers: 8 }
    }
}

impl Parallelism {
    pub fn execution(self) -> Execution {
        match self.workers {
            0 => Execution::Auto,
            n => Execution::with_width(n),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: AppConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.retrieval.validate()?;
        Ok(config)
    }

    pub fn execution(&self) -> Execution {
        self.parallelism.execution()
    }

    pub fn endpoint(&self, role: Role) -> anyhow::Result<Arc<dyn ChatEndpoint>> {
        let section = match role {
            Role::Agent => &self.endpoints.agent,
            Role::Reasoner => &self.endpoints.reasoner,
            Role::Teacher => &self.endpoints.teacher,
            Role::Summariser => &self.endpoints.summariser,
            Role::Generator => &self.endpoints.generator,
        };
        let cfg = section
            .clone()
            .ok_or_else(|| anyhow!("[endpoints.{}] is not configured", role.key()))?;
        Ok(Arc::new(HttpEndpoint::new(cfg)?))
    }

    pub fn embedder(&self) -> anyhow::Result<Arc<dyn EmbeddingProvider>> {
        Ok(match &self.embedding {
            EmbeddingSettings::Http(cfg) => Arc::new(HttpEmbedder::new(cfg.clone())?),
            EmbeddingSettings::Hashing { dimension } => Arc::new(HashingEmbedder::new(*dimension)),
        })
    }

    pub fn embed_batch_size(&self) -> usize {
        match &self.embedding {
            EmbeddingSettings::Http(cfg) => cfg.batch_size,
            EmbeddingSettings::Hashing { .. } => self.retrieval.embed_batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Agent,
    Reasoner,
    Teacher,
    Summariser,
    Generator,
}

impl Role {
    pub fn key(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::Reasoner => "reasoner",
            Role::Teacher => "teacher",
            Role::Summariser => "summariser",
            Role::Generator => "generator",
        }
    }
}
