//! REST interface for the chat client. Every response is an envelope:
//! `{"ok": true, "data": ...}` or `{"ok": false, "error": {"code", "message"}}`.
//!
//! There is no authentication; an auth layer would wrap [`router`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use leanrag_core::gateway::ChatEndpoint;
use leanrag_core::orchestrator::{run_rag_turn, OrchestratorConfig, TurnError};
use leanrag_core::retrieval::Retrieve;
use leanrag_core::synth::Demographics;
use leanrag_core::tokenizer::Tokenizer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{StoreError, ThreadStore};

/// Everything a chat turn needs besides the thread.
pub struct ChatBackend {
    pub agent: Arc<dyn ChatEndpoint>,
    pub reasoner: Arc<dyn ChatEndpoint>,
    pub retriever: Arc<dyn Retrieve>,
    pub tokenizer: Arc<dyn Tokenizer>,
    pub config: OrchestratorConfig,
}

pub struct AppState {
    pub store: Arc<ThreadStore>,
    pub backend: ChatBackend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadRequest,
    UpstreamFailure,
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip)]
    status: Option<StatusCode>,
}

impl ApiError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            status: None,
        }
    }

    fn with_status(mut self, status: StatusCode) -> Self {
        self.status = Some(status);
        self
    }

    fn status(&self) -> StatusCode {
        self.status.unwrap_or(match self.code {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::UpstreamFailure => StatusCode::BAD_GATEWAY,
            ErrorCode::Conflict => StatusCode::CONFLICT,
        })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "ok": false, "error": self }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::new(ErrorCode::NotFound, e.to_string()),
            StoreError::Busy(_) => ApiError::new(ErrorCode::Conflict, e.to_string()),
            // the snapshot file is a dependency like the model endpoints
            StoreError::Snapshot { .. } => ApiError::new(ErrorCode::UpstreamFailure, e.to_string())
                .with_status(StatusCode::SERVICE_UNAVAILABLE),
        }
    }
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        match e {
            TurnError::NoUserMessage => ApiError::new(ErrorCode::BadRequest, e.to_string()),
            _ => ApiError::new(ErrorCode::UpstreamFailure, e.to_string()),
        }
    }
}

fn ok<T: Serialize>(status: StatusCode, data: T) -> Response {
    (status, Json(json!({ "ok": true, "data": data }))).into_response()
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("invalid request body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateThread {
    #[serde(default)]
    demographics: Option<Demographics>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostMessage {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub answer: String,
    pub reasoning: Option<String>,
    pub retrieved_titles: Vec<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/threads", post(create_thread).get(list_threads))
        .route("/threads/{id}", get(get_thread))
        .route("/threads/{id}/messages", post(post_message))
        .route("/threads/{id}/demographics", put(put_demographics))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(ErrorCode::BadRequest, "method not allowed")
                .with_status(StatusCode::METHOD_NOT_ALLOWED)
        })
        .with_state(state)
}

async fn create_thread(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateThread = if body.iter().all(u8::is_ascii_whitespace) {
        CreateThread::default()
    } else {
        parse_body(&body)?
    };
    let thread = s.store.create(req.demographics)?;
    Ok(ok(StatusCode::CREATED, thread))
}

async fn list_threads(State(s): State<Arc<AppState>>) -> Response {
    ok(StatusCode::OK, s.store.list())
}

async fn get_thread(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(ok(StatusCode::OK, s.store.get(&id)?))
}

async fn put_demographics(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let demographics: Demographics = parse_body(&body)?;
    Ok(ok(StatusCode::OK, s.store.set_demographics(&id, demographics)?))
}

async fn post_message(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: PostMessage = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(ErrorCode::BadRequest, "text must not be empty"));
    }
    let guard = s.store.begin_turn(&id)?;
    let state = Arc::clone(&s);
    let reply = tokio::task::spawn_blocking(move || -> Result<MessageReply, ApiError> {
        let b = &state.backend;
        let base = guard.thread()?;
        let turn = run_rag_turn(
            &base,
            &req.text,
            b.agent.as_ref(),
            b.reasoner.as_ref(),
            b.retriever.as_ref(),
            b.tokenizer.as_ref(),
            &b.config,
        )?;
        guard.commit(&base, &turn.thread)?;
        Ok(MessageReply {
            answer: turn.reply.answer,
            reasoning: turn.reply.reasoning,
            retrieved_titles: turn.retrieved.into_iter().map(|r| r.doc_title).collect(),
        })
    })
    .await
    .map_err(|e| ApiError::new(ErrorCode::UpstreamFailure, format!("turn aborted: {e}")))??;
    Ok(ok(StatusCode::OK, reply))
}
