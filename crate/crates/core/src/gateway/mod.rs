//! Uniform access to chat and completion endpoints.
//!
//! Every model call in the crate goes through [`ChatEndpoint`]. The HTTP
//! implementation speaks the OpenAI-compatible wire format; tests plug in the
//! scripted doubles from [`scripted`].

mod budget;
mod chat_template;
mod http;
mod message;
mod reasoning;
mod retry;
pub mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use budget::{budget_forced_generate, BudgetForcedOutput, BudgetForcingPolicy};
pub use chat_template::{
    lint_messages, render_chat_template, render_generation_prompt, DelimiterLint,
    TemplateRenderError, IM_END, IM_START,
};
pub use http::{EndpointConfig, HttpEndpoint};
pub(crate) use http::redact;
pub use message::{
    validate_tool_call, ChatMessage, MessageError, ModelOutput, ParamType, Role, TokenUsage,
    ToolCall, ToolCallError, ToolParam, ToolSchema,
};
pub use reasoning::{parse_reasoning, ParsedReasoning, ThinkDelimiters};
pub use retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response did not match the expected schema: {0}")]
    Schema(String),
    #[error("endpoint does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

impl GatewayError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Which request shapes an endpoint accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Capabilities {
    pub chat: bool,
    /// Raw-prompt completion with prefix continuation (needed for budget forcing).
    pub completion: bool,
    pub tools: bool,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self {
            chat: true,
            completion: false,
            tools: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolSchema>,
    pub params: DecodeParams,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            tools: Vec::new(),
            params: DecodeParams::default(),
        }
    }

    pub fn with_tools(mut self, tools: Vec<ToolSchema>) -> Self {
        self.tools = tools;
        self
    }

    /// Content of the last message with the given role.
    pub fn last_content(&self, role: Role) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == role)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    /// Reasoning returned out of band by servers that separate it.
    pub reasoning_content: Option<String>,
    pub tool_calls: Vec<ToolCall>,
    pub usage: TokenUsage,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            ..Self::default()
        }
    }

    pub fn tool_call(call: ToolCall) -> Self {
        Self {
            tool_calls: vec![call],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinishReason {
    /// A stop sequence (or end of text) was produced.
    Stop,
    /// The `max_tokens` cap was reached.
    Length,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Continuation {
    pub text: String,
    /// Tokens generated, including a matched stop sequence.
    pub completion_tokens: usize,
    pub finish: FinishReason,
}

pub trait ChatEndpoint: Send + Sync {
    fn name(&self) -> &str {
        "endpoint"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn delimiters(&self) -> ThinkDelimiters {
        ThinkDelimiters::default()
    }

    /// Budget forcing settings, when this endpoint should decode with them.
    fn budget_forcing(&self) -> Option<&BudgetForcingPolicy> {
        None
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Continues raw text from `request.prompt`.
    fn continue_text(&self, _request: &ContinuationRequest) -> Result<Continuation, GatewayError> {
        Err(GatewayError::Unsupported("prefix continuation"))
    }
}

impl<T: ChatEndpoint + ?Sized> ChatEndpoint for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn delimiters(&self) -> ThinkDelimiters {
        (**self).delimiters()
    }
    fn budget_forcing(&self) -> Option<&BudgetForcingPolicy> {
        (**self).budget_forcing()
    }
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
    fn continue_text(&self, request: &ContinuationRequest) -> Result<Continuation, GatewayError> {
        (**self).continue_text(request)
    }
}

/// Sends a chat request and parses the reply into a [`ModelOutput`].
pub fn complete(
    endpoint: &dyn ChatEndpoint,
    messages: Vec<ChatMessage>,
    tools: Option<Vec<ToolSchema>>,
    params: DecodeParams,
) -> Result<ModelOutput, GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::InvalidRequest("no messages".into()));
    }
    if tools.as_ref().is_some_and(|t| !t.is_empty()) && !endpoint.capabilities().tools {
        return Err(GatewayError::Unsupported("tool calling"));
    }
    let request = ChatRequest {
        messages,
        tools: tools.unwrap_or_default(),
        params,
    };
    let response = endpoint.chat(&request)?;
    Ok(output_from_response(response, &endpoint.delimiters()))
}

fn output_from_response(response: ChatResponse, delimiters: &ThinkDelimiters) -> ModelOutput {
    match response.reasoning_content {
        Some(reasoning) => ModelOutput {
            raw: delimiters.wrap(&reasoning, &response.content),
            reasoning: Some(reasoning),
            answer: response.content,
            tool_calls: response.tool_calls,
            usage: response.usage,
            unterminated: false,
        },
        None => {
            let parsed = parse_reasoning(&response.content, delimiters);
            ModelOutput {
                reasoning: parsed.reasoning,
                answer: parsed.answer,
                tool_calls: response.tool_calls,
                raw: response.content,
                usage: response.usage,
                unterminated: parsed.unterminated,
            }
        }
    }
}

/// Generates a reply for a prompt conversation, using budget forcing when the
/// endpoint is configured for it and chat otherwise.
pub fn generate(
    endpoint: &dyn ChatEndpoint,
    messages: Vec<ChatMessage>,
    params: DecodeParams,
) -> Result<ModelOutput, GatewayError> {
    match endpoint.budget_forcing() {
        Some(policy) if endpoint.capabilities().completion => {
            let prompt = render_generation_prompt(&messages)
                .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
            let answer_tokens = params.max_tokens.unwrap_or(512) as usize;
            budget_forced_generate(endpoint, &prompt, policy, answer_tokens).map(|o| o.output)
        }
        _ => complete(endpoint, messages, None, params),
    }
}
