//! OpenAI-compatible HTTP endpoint (`/chat/completions`, `/completions`).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BudgetForcingPolicy, Capabilities, ChatEndpoint, ChatMessage, ChatRequest, ChatResponse,
    Continuation, ContinuationRequest, DecodeParams, FinishReason, GatewayError, RetryPolicy, Role,
    ThinkDelimiters, TokenUsage, ToolCall,
};

/// Connection settings for one model endpoint. The API key itself is read
/// from the environment variable named here and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL including the API prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub capabilities: Capabilities,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub delimiters: ThinkDelimiters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_forcing: Option<BudgetForcingPolicy>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> u64 {
    300
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            capabilities: Capabilities::default(),
            decode: DecodeParams::default(),
            delimiters: ThinkDelimiters::default(),
            budget_forcing: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }
}

pub struct HttpEndpoint {
    config: EndpointConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpEndpoint")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        self.config.retry.run(
            |_| {
                let mut req = self.client.post(self.url(path)).json(body);
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
    }

    fn merged_params(&self, params: &DecodeParams) -> DecodeParams {
        DecodeParams {
            temperature: params.temperature.or(self.config.decode.temperature),
            max_tokens: params.max_tokens.or(self.config.decode.max_tokens),
            stop: if params.stop.is_empty() {
                self.config.decode.stop.clone()
            } else {
                params.stop.clone()
            },
        }
    }
}

/// Blanks out `secret` in text that may be echoed to callers, such as an
/// upstream error body that reflects request headers.
pub(crate) fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(k) if !k.is_empty() => text.replace(k, "[redacted]"),
        _ => text.to_string(),
    }
}

pub(crate) fn message_to_wire(m: &ChatMessage) -> Value {
    let mut v = json!({ "role": m.role.as_str(), "content": m.content });
    if !m.tool_calls.is_empty() {
        v["tool_calls"] = Value::Array(
            m.tool_calls
                .iter()
                .map(|c| {
                    json!({
                        "id": c.call_id,
                        "type": "function",
                        "function": {
                            "name": c.name,
                            "arguments": match &c.arguments {
                                Value::String(s) => s.clone(),
                                other => other.to_string(),
                            },
                        },
                    })
                })
                .collect(),
        );
    }
    if m.role == Role::Tool {
        if let Some(id) = &m.tool_call_id {
            v["tool_call_id"] = json!(id);
        }
    }
    v
}

/// Builds the JSON body for `/chat/completions`.
pub(crate) fn chat_body(model: &str, request: &ChatRequest, params: &DecodeParams) -> Value {
    let mut body = json!({
        "model": model,
        "messages": request.messages.iter().map(message_to_wire).collect::<Vec<_>>(),
    });
    if !request.tools.is_empty() {
        body["tools"] = Value::Array(request.tools.iter().map(|t| t.to_openai_json()).collect());
    }
    if let Some(t) = params.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(n) = params.max_tokens {
        body["max_tokens"] = json!(n);
    }
    if !params.stop.is_empty() {
        body["stop"] = json!(params.stop);
    }
    body
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: Option<Value>,
}

#[derive(Deserialize)]
struct WireToolCall {
    #[serde(default)]
    id: Option<String>,
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    reasoning_content: Option<String>,
    #[serde(default)]
    tool_calls: Option<Vec<WireToolCall>>,
}

#[derive(Deserialize)]
struct WireChatChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

fn decode_arguments(raw: Option<Value>) -> Value {
    match raw {
        None => Value::Object(Default::default()),
        Some(Value::String(s)) => serde_json::from_str(&s).unwrap_or(Value::String(s)),
        Some(other) => other,
    }
}

/// Parses a `/chat/completions` response body.
pub(crate) fn parse_chat_response(body: Value) -> Result<ChatResponse, GatewayError> {
    let wire: WireChatResponse =
        serde_json::from_value(body).map_err(|e| GatewayError::Schema(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Schema("no choices in response".into()))?;
    let tool_calls = choice
        .message
        .tool_calls
        .unwrap_or_default()
        .into_iter()
        .enumerate()
        .map(|(i, c)| ToolCall {
            call_id: c.id.unwrap_or_else(|| format!("call_{i}")),
            name: c.function.name,
            arguments: decode_arguments(c.function.arguments),
        })
        .collect();
    Ok(ChatResponse {
        content: choice.message.content.unwrap_or_default(),
        reasoning_content: choice.message.reasoning_content.filter(|r| !r.is_empty()),
        tool_calls,
        usage: wire
            .usage
            .map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default(),
    })
}

#[derive(Deserialize)]
struct WireCompletionChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireCompletionResponse {
    choices: Vec<WireCompletionChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

/// Parses a `/completions` response body.
pub(crate) fn parse_completion_response(body: Value) -> Result<Continuation, GatewayError> {
    let wire: WireCompletionResponse =
        serde_json::from_value(body).map_err(|e| GatewayError::Schema(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Schema("no choices in response".into()))?;
    let finish = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    Ok(Continuation {
        text: choice.text,
        completion_tokens: wire.usage.map(|u| u.completion_tokens as usize).unwrap_or(0),
        finish,
    })
}

impl ChatEndpoint for HttpEndpoint {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn capabilities(&self) -> Capabilities {
        self.config.capabilities
    }

    fn delimiters(&self) -> ThinkDelimiters {
        self.config.delimiters.clone()
    }

    fn budget_forcing(&self) -> Option<&BudgetForcingPolicy> {
        self.config.budget_forcing.as_ref()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if !self.config.capabilities.chat {
            return Err(GatewayError::Unsupported("chat"));
        }
        let body = chat_body(&self.config.model, request, &self.merged_params(&request.params));
        parse_chat_response(self.post("chat/completions", &body)?)
    }

    fn continue_text(&self, request: &ContinuationRequest) -> Result<Continuation, GatewayError> {
        if !self.config.capabilities.completion {
            return Err(GatewayError::Unsupported("prefix continuation"));
        }
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
        });
        if !request.stop.is_empty() {
            body["stop"] = json!(request.stop);
        }
        if let Some(t) = request.temperature.or(self.config.decode.temperature) {
            body["temperature"] = json!(t);
        }
        parse_completion_response(self.post("completions", &body)?)
    }
}
