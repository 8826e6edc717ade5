use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub name: String,
    /// Decoded arguments. Arguments that were not valid JSON are kept as a
    /// string so validation can report them back to the model.
    pub arguments: Value,
}

impl ToolCall {
    pub fn new(call_id: impl Into<String>, name: impl Into<String>, arguments: Value) -> Self {
        Self {
            call_id: call_id.into(),
            name: name.into(),
            arguments,
        }
    }

    pub fn argument_str(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    /// Set on tool messages: the call this message answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_tool_calls(content: impl Into<String>, calls: Vec<ToolCall>) -> Self {
        Self {
            tool_calls: calls,
            ..Self::plain(Role::Assistant, content)
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            tool_call_id: Some(call_id.into()),
            ..Self::plain(Role::Tool, content)
        }
    }

    /// Checks the per-role shape rules: only assistants carry tool calls and
    /// empty content is only allowed alongside tool calls.
    pub fn check(&self) -> Result<(), MessageError> {
        if self.role != Role::Assistant && !self.tool_calls.is_empty() {
            return Err(MessageError::UnexpectedToolCalls(self.role));
        }
        if self.content.is_empty() && self.tool_calls.is_empty() && self.role != Role::Assistant {
            return Err(MessageError::EmptyContent(self.role));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MessageError {
    #[error("{0} messages cannot carry tool calls")]
    UnexpectedToolCalls(Role),
    #[error("{0} message has empty content")]
    EmptyContent(Role),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    fn json_name(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::Boolean => "boolean",
            ParamType::Object => "object",
            ParamType::Array => "array",
        }
    }

    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::String => v.is_string(),
            ParamType::Number => v.is_number(),
            ParamType::Integer => v.is_i64() || v.is_u64(),
            ParamType::Boolean => v.is_boolean(),
            ParamType::Object => v.is_object(),
            ParamType::Array => v.is_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    pub kind: ParamType,
    pub required: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ToolParam>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToolCallError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("arguments for `{0}` must be a JSON object")]
    NotAnObject(String),
    #[error("missing required argument `{0}`")]
    MissingArgument(String),
    #[error("argument `{name}` must be of type {expected}")]
    WrongType { name: String, expected: &'static str },
    #[error("unexpected argument `{0}`")]
    UnexpectedArgument(String),
    #[error("duplicate parameter `{0}` in tool schema")]
    DuplicateParameter(String),
}

impl ToolCallError {
    /// Tool-role message reporting the error so the model can retry.
    pub fn to_tool_message(&self, call_id: &str) -> ChatMessage {
        let body = serde_json::json!({ "error": self.to_string() });
        ChatMessage::tool(call_id, body.to_string())
    }
}

impl ToolSchema {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters: Vec::new(),
        }
    }

    pub fn param(
        mut self,
        name: impl Into<String>,
        kind: ParamType,
        required: bool,
        description: impl Into<String>,
    ) -> Self {
        self.parameters.push(ToolParam {
            name: name.into(),
            kind,
            required,
            description: description.into(),
        });
        self
    }

    pub fn check(&self) -> Result<(), ToolCallError> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.parameters {
            if !seen.insert(p.name.as_str()) {
                return Err(ToolCallError::DuplicateParameter(p.name.clone()));
            }
        }
        Ok(())
    }

    /// OpenAI-style `{"type": "function", "function": {...}}` definition.
    pub fn to_openai_json(&self) -> Value {
        let mut properties = Map::new();
        for p in &self.parameters {
            properties.insert(
                p.name.clone(),
                serde_json::json!({ "type": p.kind.json_name(), "description": p.description }),
            );
        }
        let required: Vec<&str> = self
            .parameters
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": required,
                },
            },
        })
    }

    pub fn validate(&self, call: &ToolCall) -> Result<(), ToolCallError> {
        if call.name != self.name {
            return Err(ToolCallError::UnknownTool(call.name.clone()));
        }
        let args = call
            .arguments
            .as_object()
            .ok_or_else(|| ToolCallError::NotAnObject(self.name.clone()))?;
        for p in &self.parameters {
            match args.get(&p.name) {
                None | Some(Value::Null) if p.required => {
                    return Err(ToolCallError::MissingArgument(p.name.clone()))
                }
                Some(v) if !v.is_null() && !p.kind.accepts(v) => {
                    return Err(ToolCallError::WrongType {
                        name: p.name.clone(),
                        expected: p.kind.json_name(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = args
            .keys()
            .find(|k| !self.parameters.iter().any(|p| &p.name == *k))
        {
            return Err(ToolCallError::UnexpectedArgument(extra.clone()));
        }
        Ok(())
    }
}

/// Validates a call against whichever registered schema carries its name.
pub fn validate_tool_call(call: &ToolCall, schemas: &[ToolSchema]) -> Result<(), ToolCallError> {
    schemas
        .iter()
        .find(|s| s.name == call.name)
        .ok_or_else(|| ToolCallError::UnknownTool(call.name.clone()))?
        .validate(call)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

/// A parsed model response.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelOutput {
    pub reasoning: Option<String>,
    pub answer: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    pub raw: String,
    #[serde(default)]
    pub usage: TokenUsage,
    /// The reasoning opened but never closed.
    #[serde(default)]
    pub unterminated: bool,
}
