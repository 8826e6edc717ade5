//! Multi-turn conversations: an agent decides per turn whether to call the
//! retriever, and a reasoner answers with the retrieved documents placed in
//! its system prompt.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    self, ChatEndpoint, ChatMessage, DecodeParams, GatewayError, ModelOutput, ParamType, Role,
    ToolCall, ToolSchema,
};
use crate::prompts;
use crate::retrieval::{render_context, Retrieve, RetrievalError, RetrievalResult};
use crate::synth::Demographics;
use crate::template::{self, TemplateError};
use crate::tokenizer::Tokenizer;

pub const RETRIEVER_TOOL_NAME: &str = "retrieve_condition_context";

/// Reply used when the agent produces neither usable text nor a valid call.
pub const FALLBACK_REPLY: &str =
    "Sorry, I could not process that. Could you describe your symptoms in a bit more detail?";

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("the conversation has no user message")]
    NoUserMessage,
    #[error("agent call failed: {0}")]
    Agent(GatewayError),
    #[error("reasoner call failed: {0}")]
    Reasoner(GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// A stored message with what the interface shows next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadMessage {
    #[serde(flatten)]
    pub message: ChatMessage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved_titles: Vec<String>,
}

impl ThreadMessage {
    pub fn plain(message: ChatMessage) -> Self {
        Self {
            message,
            reasoning: None,
            retrieved_titles: Vec::new(),
        }
    }
}

/// One conversation. Only user and assistant turns are stored; system
/// prompts are built per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationThread {
    pub thread_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    #[serde(default)]
    pub demographics: Option<Demographics>,
    #[serde(default)]
    pub messages: Vec<ThreadMessage>,
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl ConversationThread {
    pub fn new(thread_id: impl Into<String>) -> Self {
        Self {
            thread_id: thread_id.into(),
            created_at: now_secs(),
            demographics: None,
            messages: Vec::new(),
        }
    }

    pub fn chat_messages(&self) -> Vec<ChatMessage> {
        self.messages.iter().map(|m| m.message.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimPolicy {
    pub max_history_tokens: usize,
}

impl Default for TrimPolicy {
    fn default() -> Self {
        Self {
            max_history_tokens: 8192,
        }
    }
}

pub fn message_tokens(messages: &[ChatMessage], tokenizer: &dyn Tokenizer) -> usize {
    messages
        .iter()
        .map(|m| tokenizer.count_tokens(&m.content))
        .sum()
}

/// Drops the oldest non-system messages until the content token count fits
/// the budget. System messages always stay; order is preserved.
pub fn trim_history(
    messages: &[ChatMessage],
    policy: &TrimPolicy,
    tokenizer: &dyn Tokenizer,
) -> Vec<ChatMessage> {
    let counts: Vec<usize> = messages
        .iter()
        .map(|m| tokenizer.count_tokens(&m.content))
        .collect();
    let mut total: usize = counts.iter().sum();
    let mut keep = vec![true; messages.len()];
    for (i, m) in messages.iter().enumerate() {
        if total <= policy.max_history_tokens {
            break;
        }
        if m.role != Role::System {
            keep[i] = false;
            total -= counts[i];
        }
    }
    if total > policy.max_history_tokens {
        log::warn!(
            "system prompt alone has {total} tokens, above the {} token history budget",
            policy.max_history_tokens
        );
    }
    messages
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(m, _)| m.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentDecision {
    Retrieve { query: String },
    DirectReply { text: String },
}

pub fn retriever_tool() -> ToolSchema {
    ToolSchema::new(
        RETRIEVER_TOOL_NAME,
        "Retrieve context from NHS condition web pages that may be relevant to the patient's symptoms.",
    )
    .param(
        "query",
        ParamType::String,
        true,
        "Search query describing the symptoms, written from the whole conversation.",
    )
}

fn check_call(call: &ToolCall, tool: &ToolSchema) -> Result<String, String> {
    tool.validate(call).map_err(|e| e.to_string())?;
    match call.argument_str("query").map(str::trim) {
        Some(q) if !q.is_empty() => Ok(q.to_string()),
        _ => Err("argument `query` must not be empty".into()),
    }
}

/// Asks the agent whether to retrieve. An invalid tool call is answered once
/// with a structured error; a second invalid call falls back to a reply.
pub fn decide_action(
    history: &[ChatMessage],
    agent: &dyn ChatEndpoint,
    retriever_tool: &ToolSchema,
    policy: &TrimPolicy,
    tokenizer: &dyn Tokenizer,
    params: &DecodeParams,
) -> Result<AgentDecision, TurnError> {
    if !history.iter().any(|m| m.role == Role::User) {
        return Err(TurnError::NoUserMessage);
    }
    let mut messages = vec![ChatMessage::system(prompts::AGENT_SYSTEM_PROMPT)];
    messages.extend(history.iter().filter(|m| m.role != Role::System).cloned());
    let mut messages = trim_history(&messages, policy, tokenizer);
    let tools = vec![retriever_tool.clone()];

    for attempt in 0..2 {
        let out = gateway::complete(agent, messages.clone(), Some(tools.clone()), params.clone())
            .map_err(TurnError::Agent)?;
        let Some(call) = out.tool_calls.first() else {
            let text = out.answer.trim();
            return Ok(AgentDecision::DirectReply {
                text: if text.is_empty() {
                    FALLBACK_REPLY.to_string()
                } else {
                    text.to_string()
                },
            });
        };
        match check_call(call, retriever_tool) {
            Ok(query) => return Ok(AgentDecision::Retrieve { query }),
            Err(e) if attempt == 0 => {
                log::warn!("agent made an invalid tool call: {e}");
                messages.push(ChatMessage::assistant_tool_calls(
                    out.answer.clone(),
                    out.tool_calls.clone(),
                ));
                let body = serde_json::json!({ "error": e });
                messages.push(ChatMessage::tool(call.call_id.clone(), body.to_string()));
            }
            Err(e) => {
                log::warn!("agent repeated an invalid tool call ({e}); replying directly");
            }
        }
    }
    Ok(AgentDecision::DirectReply {
        text: FALLBACK_REPLY.to_string(),
    })
}

pub const NO_DEMOGRAPHICS: &str = "Not provided";

/// The reasoner's system prompt for one retrieval turn.
pub fn rag_system_prompt(
    retrieved: &[RetrievalResult],
    demographics: Option<&Demographics>,
) -> Result<String, TemplateError> {
    let demographics = demographics.map_or_else(|| NO_DEMOGRAPHICS.to_string(), Demographics::render);
    template::fill(
        prompts::RAG_SYSTEM_PROMPT,
        &[
            ("context", &render_context(retrieved)),
            ("demographics", &demographics),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub k: usize,
    pub trim: TrimPolicy,
    pub agent_params: DecodeParams,
    pub reasoner_params: DecodeParams,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            k: 5,
            trim: TrimPolicy::default(),
            agent_params: DecodeParams::default(),
            reasoner_params: DecodeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult {
    pub reply: ModelOutput,
    pub decision: AgentDecision,
    pub retrieved: Vec<RetrievalResult>,
    pub thread: ConversationThread,
}

/// Runs one turn on a copy of `thread`. The caller stores the returned
/// thread only on success, so a failed turn leaves the conversation intact.
pub fn run_rag_turn(
    thread: &ConversationThread,
    user_msg: &str,
    agent: &dyn ChatEndpoint,
    reasoner: &dyn ChatEndpoint,
    retriever: &dyn Retrieve,
    tokenizer: &dyn Tokenizer,
    config: &OrchestratorConfig,
) -> Result<TurnResult, TurnError> {
    let mut next = thread.clone();
    next.messages
        .push(ThreadMessage::plain(ChatMessage::user(user_msg)));
    let history = next.chat_messages();
    let decision = decide_action(
        &history,
        agent,
        &retriever_tool(),
        &config.trim,
        tokenizer,
        &config.agent_params,
    )?;
    let (reply, retrieved) = match &decision {
        AgentDecision::Retrieve { query } => {
            let retrieved = retriever.retrieve(query, config.k)?;
            let system = rag_system_prompt(&retrieved, next.demographics.as_ref())?;
            let mut messages = vec![ChatMessage::system(system)];
            messages.extend(history);
            let messages = trim_history(&messages, &config.trim, tokenizer);
            let out = gateway::generate(reasoner, messages, config.reasoner_params.clone())
                .map_err(TurnError::Reasoner)?;
            (out, retrieved)
        }
        AgentDecision::DirectReply { text } => (
            ModelOutput {
                answer: text.clone(),
                raw: text.clone(),
                ..ModelOutput::default()
            },
            Vec::new(),
        ),
    };
    next.messages.push(ThreadMessage {
        message: ChatMessage::assistant(reply.answer.clone()),
        reasoning: reply.reasoning.clone(),
        retrieved_titles: retrieved.iter().map(|r| r.doc_title.clone()).collect(),
    });
    Ok(TurnResult {
        reply,
        decision,
        retrieved,
        thread: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::scripted::ScriptedChat;
    use crate::gateway::ChatResponse;
    use crate::tokenizer::WhitespaceTokenizer;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    #[test]
    fn trim_examples() {
        let tok = WhitespaceTokenizer;
        let msgs = vec![
            ChatMessage::system(words(2)),
            ChatMessage::user(words(3)),
            ChatMessage::assistant(words(3)),
            ChatMessage::user(words(4)),
        ];
        let policy = TrimPolicy { max_history_tokens: 12 };
        assert_eq!(trim_history(&msgs, &policy, &tok), msgs);
        let policy = TrimPolicy { max_history_tokens: 6 };
        assert_eq!(
            trim_history(&msgs, &policy, &tok),
            vec![msgs[0].clone(), msgs[3].clone()]
        );
        let policy = TrimPolicy { max_history_tokens: 1 };
        assert_eq!(trim_history(&msgs, &policy, &tok), vec![msgs[0].clone()]);
    }

    fn tool_call(query: &str) -> ChatResponse {
        ChatResponse::tool_call(ToolCall::new("c1", RETRIEVER_TOOL_NAME, json!({ "query": query })))
    }

    fn decide(agent: &ScriptedChat, history: &[ChatMessage]) -> AgentDecision {
        decide_action(
            history,
            agent,
            &retriever_tool(),
            &TrimPolicy::default(),
            &WhitespaceTokenizer,
            &DecodeParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn greeting_gets_a_direct_reply() {
        let agent = ScriptedChat::always_text("Hello! What symptoms do you have?");
        assert_eq!(
            decide(&agent, &[ChatMessage::user("Hello")]),
            AgentDecision::DirectReply {
                text: "Hello! What symptoms do you have?".into()
            }
        );
    }

    #[test]
    fn follow_up_becomes_a_retrieval() {
        let agent = ScriptedChat::new(|req| {
            assert_eq!(req.messages[0].content, prompts::AGENT_SYSTEM_PROMPT);
            assert_eq!(req.tools[0].name, RETRIEVER_TOOL_NAME);
            Ok(tool_call("over-the-counter pain relievers headache"))
        });
        let history = vec![
            ChatMessage::user("I have a headache"),
            ChatMessage::assistant("You could take painkillers."),
            ChatMessage::user("Where can I buy them?"),
        ];
        assert_eq!(
            decide(&agent, &history),
            AgentDecision::Retrieve {
                query: "over-the-counter pain relievers headache".into()
            }
        );
    }

    #[test]
    fn invalid_calls_retry_once_then_fall_back() {
        let agent = ScriptedChat::new(|_| {
            Ok(ChatResponse::tool_call(ToolCall::new("c1", "web_search", json!({"q": 1}))))
        });
        assert_eq!(
            decide(&agent, &[ChatMessage::user("hi")]),
            AgentDecision::DirectReply {
                text: FALLBACK_REPLY.into()
            }
        );
        assert_eq!(agent.calls(), 2);
    }

    #[test]
    fn structured_error_lets_the_agent_recover() {
        let agent = ScriptedChat::new(|req| {
            match req.messages.last().unwrap().role {
                Role::Tool => {
                    assert!(req.messages.last().unwrap().content.contains("error"));
                    Ok(tool_call("knee pain"))
                }
                _ => Ok(tool_call("  ")),
            }
        });
        assert_eq!(
            decide(&agent, &[ChatMessage::user("my knee")]),
            AgentDecision::Retrieve {
                query: "knee pain".into()
            }
        );
    }

    #[test]
    fn no_user_message_is_an_error() {
        let agent = ScriptedChat::always_text("x");
        assert!(decide_action(
            &[],
            &agent,
            &retriever_tool(),
            &TrimPolicy::default(),
            &WhitespaceTokenizer,
            &DecodeParams::default()
        )
        .is_err());
    }

    #[derive(Default)]
    struct Counting(AtomicUsize);
    impl Retrieve for Counting {
        fn retrieve(&self, _q: &str, k: usize) -> Result<Vec<RetrievalResult>, RetrievalError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok((0..k)
                .map(|i| RetrievalResult {
                    doc_title: format!("Cond{i}"),
                    best_score: i as f32,
                    matched_chunks: vec![(0, i as f32)],
                    payload: format!("CONTEXT-{i}"),
                })
                .collect())
        }
    }

    #[test]
    fn retrieval_turn_puts_context_in_the_system_prompt() {
        let agent = ScriptedChat::new(|_| Ok(tool_call("hip pain")));
        let reasoner = ScriptedChat::new(|req| {
            assert_eq!(req.messages[0].role, Role::System);
            assert!(req.messages[0].content.contains("CONTEXT-4"));
            assert!(req.messages[1..].iter().all(|m| !m.content.contains("CONTEXT")));
            Ok(ChatResponse::text("<think>r</think>Answer"))
        });
        let retriever = Counting::default();
        let thread = ConversationThread::new("t1");
        let turn = run_rag_turn(
            &thread,
            "I fell on my hip",
            &agent,
            &reasoner,
            &retriever,
            &WhitespaceTokenizer,
            &OrchestratorConfig::default(),
        )
        .unwrap();
        assert_eq!(turn.reply.answer, "Answer");
        assert_eq!(turn.reply.reasoning.as_deref(), Some("r"));
        assert_eq!(turn.retrieved.len(), 5);
        let stored = &turn.thread.messages;
        assert_eq!(stored.len(), 2);
        assert_eq!(stored[1].retrieved_titles.len(), 5);
        assert!(stored.iter().all(|m| !m.message.content.contains("CONTEXT")));
        assert!(thread.messages.is_empty());
    }

    #[test]
    fn direct_reply_never_touches_the_index() {
        let agent = ScriptedChat::always_text("Hi, how can I help?");
        let reasoner = ScriptedChat::always_text("unused");
        let retriever = Counting::default();
        let turn = run_rag_turn(
            &ConversationThread::new("t"),
            "Hello",
            &agent,
            &reasoner,
            &retriever,
            &WhitespaceTokenizer,
            &OrchestratorConfig::default(),
        )
        .unwrap();
        assert_eq!(turn.reply.answer, "Hi, how can I help?");
        assert_eq!(retriever.0.load(Ordering::SeqCst), 0);
        assert_eq!(reasoner.calls(), 0);
    }

    #[test]
    fn reasoner_failure_surfaces_as_error() {
        let agent = ScriptedChat::new(|_| Ok(tool_call("x")));
        let reasoner = ScriptedChat::new(|_| Err(GatewayError::Transport("down".into())));
        let err = run_rag_turn(
            &ConversationThread::new("t"),
            "help",
            &agent,
            &reasoner,
            &Counting::default(),
            &WhitespaceTokenizer,
            &OrchestratorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TurnError::Reasoner(_)));
    }

    #[test]
    fn demographics_reach_the_rag_prompt() {
        let d = Demographics {
            age: "above 80".into(),
            sex: "Female".into(),
            occupation: "Retired".into(),
            social_support: "Lives with daughter".into(),
            medical_history: "Diabetes".into(),
        };
        let p = rag_system_prompt(&[], Some(&d)).unwrap();
        assert!(p.ends_with(&d.render()));
        assert!(rag_system_prompt(&[], None).unwrap().ends_with(NO_DEMOGRAPHICS));
    }

    #[test]
    fn thread_serialises_flat_messages() {
        let mut t = ConversationThread::new("t");
        t.messages.push(ThreadMessage {
            message: ChatMessage::assistant("a"),
            reasoning: Some("r".into()),
            retrieved_titles: vec!["X".into()],
        });
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["messages"][0]["role"], "assistant");
        assert_eq!(v["messages"][0]["reasoning"], "r");
        let back: ConversationThread = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }
}
