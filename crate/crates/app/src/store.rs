//! Conversation threads owned by the backend, snapshotted to one JSON file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use leanrag_core::corpus::write_json;
use leanrag_core::orchestrator::{ConversationThread, ThreadMessage};
use leanrag_core::gateway::Role;
use leanrag_core::synth::Demographics;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no thread with id {0}")]
    NotFound(String),
    #[error("a reply is already being generated on thread {0}")]
    Busy(String),
    #[error("snapshot {path}: {message}")]
    Snapshot { path: PathBuf, message: String },
}

/// Thread list entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadSummary {
    pub thread_id: String,
    pub created_at: u64,
    /// Start of the first user message, empty for a new thread.
    pub title: String,
    pub message_count: usize,
}

const TITLE_CHARS: usize = 60;

impl ThreadSummary {
    fn of(t: &ConversationThread) -> Self {
        let title = t
            .messages
            .iter()
            .find(|m| m.message.role == Role::User)
            .map(|m| m.message.content.chars().take(TITLE_CHARS).collect())
            .unwrap_or_default();
        Self {
            thread_id: t.thread_id.clone(),
            created_at: t.created_at,
            title,
            message_count: t.messages.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    threads: BTreeMap<String, ConversationThread>,
}

pub struct ThreadStore {
    threads: RwLock<BTreeMap<String, ConversationThread>>,
    in_flight: Mutex<HashSet<String>>,
    path: Option<PathBuf>,
}

impl ThreadStore {
    pub fn in_memory() -> Self {
        Self {
            threads: RwLock::new(BTreeMap::new()),
            in_flight: Mutex::new(HashSet::new()),
            path: None,
        }
    }

    /// Opens a file-backed store, loading the snapshot when it exists.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let threads = if path.exists() {
            let err = |message: String| StoreError::Snapshot {
                path: path.to_path_buf(),
                message,
            };
            let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            let snap: Snapshot = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
            snap.threads
        } else {
            BTreeMap::new()
        };
        log::info!("thread store {} holds {} threads", path.display(), threads.len());
        Ok(Self {
            threads: RwLock::new(threads),
            in_flight: Mutex::new(HashSet::new()),
            path: Some(path.to_path_buf()),
        })
    }

    fn persist(&self, threads: &BTreeMap<String, ConversationThread>) -> Result<(), StoreError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        #[derive(Serialize)]
        struct SnapshotRef<'a> {
            threads: &'a BTreeMap<String, ConversationThread>,
        }
        write_json(path, &SnapshotRef { threads }).map_err(|e| StoreError::Snapshot {
            path: path.clone(),
            message: e.to_string(),
        })
    }

    pub fn create(&self, demographics: Option<Demographics>) -> Result<ConversationThread, StoreError> {
        let mut thread = ConversationThread::new(uuid::Uuid::new_v4().to_string());
        thread.demographics = demographics;
        let mut threads = self.threads.write().expect("store lock poisoned");
        threads.insert(thread.thread_id.clone(), thread.clone());
        self.persist(&threads)?;
        Ok(thread)
    }

    /// Newest first.
    pub fn list(&self) -> Vec<ThreadSummary> {
        let threads = self.threads.read().expect("store lock poisoned");
        let mut out: Vec<ThreadSummary> = threads.values().map(ThreadSummary::of).collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.thread_id.cmp(&b.thread_id)));
        out
    }

    pub fn get(&self, id: &str) -> Result<ConversationThread, StoreError> {
        self.threads
            .read()
            .expect("store lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn set_demographics(
        &self,
        id: &str,
        demographics: Demographics,
    ) -> Result<ConversationThread, StoreError> {
        let mut threads = self.threads.write().expect("store lock poisoned");
        let thread = threads
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        thread.demographics = Some(demographics);
        let out = thread.clone();
        self.persist(&threads)?;
        Ok(out)
    }

    /// Claims the thread for one turn. The claim is released when the guard
    /// drops; a second claim meanwhile fails with [`StoreError::Busy`].
    pub fn begin_turn(self: &Arc<Self>, id: &str) -> Result<TurnGuard, StoreError> {
        self.get(id)?;
        let mut in_flight = self.in_flight.lock().expect("in-flight lock poisoned");
        if !in_flight.insert(id.to_string()) {
            return Err(StoreError::Busy(id.to_string()));
        }
        Ok(TurnGuard {
            store: Arc::clone(self),
            id: id.to_string(),
        })
    }

    /// Appends the messages a turn produced. Demographics edited while the
    /// turn ran are kept.
    fn append(&self, id: &str, new_messages: &[ThreadMessage]) -> Result<ConversationThread, StoreError> {
        let mut threads = self.threads.write().expect("store lock poisoned");
        let thread = threads
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        thread.messages.extend_from_slice(new_messages);
        let out = thread.clone();
        self.persist(&threads)?;
        Ok(out)
    }
}

pub struct TurnGuard {
    store: Arc<ThreadStore>,
    id: String,
}

impl TurnGuard {
    /// The thread as of the claim.
    pub fn thread(&self) -> Result<ConversationThread, StoreError> {
        self.store.get(&self.id)
    }

    /// Stores the messages `updated` has beyond `base`.
    pub fn commit(
        self,
        base: &ConversationThread,
        updated: &ConversationThread,
    ) -> Result<ConversationThread, StoreError> {
        self.store.append(&self.id, &updated.messages[base.messages.len()..])
    }
}

impl Drop for TurnGuard {
    fn drop(&mut self) {
        if let Ok(mut set) = self.store.in_flight.lock() {
            set.remove(&self.id);
        }
    }
}
