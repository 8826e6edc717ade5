//! A scripted OpenAI-compatible upstream for the integration tests. Replies
//! depend on the `model` field so one server plays every role.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use leanrag_core::retrieval::HashingEmbedder;
use serde_json::{json, Value};

pub const EMBED_DIM: usize = 64;

#[derive(Default)]
pub struct Counters {
    pub chat: AtomicUsize,
    pub completions: AtomicUsize,
    pub embeds: AtomicUsize,
}

pub struct Upstream {
    /// e.g. `http://127.0.0.1:41234`
    pub base: String,
    pub counters: Arc<Counters>,
}

/// Binds on an ephemeral port and serves from a background thread until the
/// test process exits.
pub fn spawn_upstream() -> Upstream {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    let counters = Arc::new(Counters::default());
    let app = Router::new()
        .route("/embed", post(embed))
        .route("/v1/chat/completions", post(chat))
        .route("/v1/completions", post(completions))
        .route("/leaky/v1/chat/completions", post(leaky))
        .with_state(Arc::clone(&counters));
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    Upstream {
        base: format!("http://{addr}"),
        counters,
    }
}

async fn embed(State(c): State<Arc<Counters>>, Json(body): Json<Value>) -> Json<Value> {
    c.embeds.fetch_add(1, Ordering::Relaxed);
    let e = HashingEmbedder::new(EMBED_DIM);
    let vectors: Vec<Vec<f32>> = body["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| e.embed_one(t.as_str().unwrap()))
        .collect();
    Json(json!({ "vectors": vectors }))
}

fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.find(marker).map(|i| &text[i + marker.len()..])
}

fn line_after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    after(text, marker).map(|rest| rest.lines().next().unwrap_or(""))
}

/// The first `Title:` in a rendered context block.
pub fn first_title(text: &str) -> Option<&str> {
    line_after(text, "Title: ").map(str::trim)
}

fn chat_reply(content: String) -> Json<Value> {
    Json(json!({
        "choices": [{ "message": { "role": "assistant", "content": content }, "finish_reason": "stop" }],
        "usage": { "prompt_tokens": 10, "completion_tokens": 5 }
    }))
}

async fn chat(State(c): State<Arc<Counters>>, Json(body): Json<Value>) -> Json<Value> {
    c.chat.fetch_add(1, Ordering::Relaxed);
    let prompt: String = body["messages"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|m| m["content"].as_str())
        .collect::<Vec<_>>()
        .join("\n");
    match body["model"].as_str().unwrap() {
        "summariser" => {
            let doc = after(&prompt, "Document:\n").unwrap_or("");
            let words: Vec<&str> = doc.split_whitespace().take(10).collect();
            chat_reply(words.join(" "))
        }
        "generator" => chat_reply(generate(&prompt)),
        "reasoner" => {
            let title = first_title(&prompt).unwrap_or("inconclusive");
            chat_reply(format!("({title}, Self-care)"))
        }
        "agent" => {
            let query = body["messages"]
                .as_array()
                .unwrap()
                .iter()
                .rev()
                .find(|m| m["role"] == "user")
                .and_then(|m| m["content"].as_str())
                .unwrap_or("")
                .to_string();
            Json(json!({
                "choices": [{ "message": { "role": "assistant", "content": null, "tool_calls": [{
                    "id": "call_1",
                    "type": "function",
                    "function": { "name": leanrag_core::orchestrator::RETRIEVER_TOOL_NAME, "arguments": json!({ "query": query }).to_string() }
                }]}}]
            }))
        }
        other => chat_reply(format!("unknown model {other}")),
    }
}

/// Builds a query from the symptom words on the page. Pages carrying the
/// word `mild` have nothing to say about emergencies and are refused for A&E.
fn generate(prompt: &str) -> String {
    let severity = line_after(prompt, "Severity Level: ").unwrap_or("").trim();
    let sex = line_after(prompt, "Sex: ").unwrap_or("Female").trim();
    let content = after(prompt, "Conditions web page content: ").unwrap_or("");
    if severity == "A&E" && content.contains(" mild ") {
        return json!({ "error": leanrag_core::prompts::INSUFFICIENT_INFO_ERROR }).to_string();
    }
    let symptoms = after(content, "Symptoms: ")
        .and_then(|s| s.split('.').next())
        .unwrap_or("");
    let words: Vec<&str> = symptoms.split_whitespace().collect();
    // a different subset for each severity
    let skip = match severity {
        "A&E" => 0,
        "Urgent Primary Care" => 1,
        _ => 2,
    };
    let picked: Vec<&str> = words.iter().skip(skip).step_by(2).copied().collect();
    let reply = json!({
        "general_demographics": {
            "age": "45",
            "sex": sex,
            "occupation": "Plumber",
            "social_support": "No support network.",
            "medical_history": "None relevant"
        },
        "symptoms_description": format!("I have {} and it worries me", picked.join(" "))
    });
    format!("```json\n{reply:#}\n```")
}

/// Prefix continuation for a budget-forced teacher: a short thought per
/// call, and the top context title once thinking is closed.
async fn completions(State(c): State<Arc<Counters>>, Json(body): Json<Value>) -> Json<Value> {
    c.completions.fetch_add(1, Ordering::Relaxed);
    let prompt = body["prompt"].as_str().unwrap();
    let (text, tokens) = if prompt.ends_with("</think>") {
        let title = first_title(prompt).unwrap_or("inconclusive");
        (format!("\n\n({title}, Self-care)"), 4)
    } else {
        (" The first source fits the symptoms best.".to_string(), 9)
    };
    Json(json!({
        "choices": [{ "text": text, "finish_reason": "stop" }],
        "usage": { "prompt_tokens": 100, "completion_tokens": tokens }
    }))
}

/// A misbehaving server that echoes the caller's headers in its error body.
async fn leaky(headers: HeaderMap) -> (StatusCode, String) {
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_string();
    (StatusCode::INTERNAL_SERVER_ERROR, format!("upstream exploded; request had Authorization: {auth}"))
}
