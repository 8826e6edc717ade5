//! Deterministic in-process endpoints for tests and offline runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    BudgetForcingPolicy, Capabilities, ChatEndpoint, ChatRequest, ChatResponse, Continuation,
    ContinuationRequest, FinishReason, GatewayError, ThinkDelimiters,
};

type Responder = dyn Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync;

/// Chat endpoint backed by a closure. Counts calls.
pub struct ScriptedChat {
    name: String,
    responder: Box<Responder>,
    capabilities: Capabilities,
    delimiters: ThinkDelimiters,
    calls: AtomicUsize,
}

impl ScriptedChat {
    pub fn new(
        responder: impl Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: "scripted".into(),
            responder: Box::new(responder),
            capabilities: Capabilities {
                chat: true,
                completion: false,
                tools: true,
            },
            delimiters: ThinkDelimiters::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn always_text(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(ChatResponse::text(text.clone())))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatEndpoint for ScriptedChat {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn delimiters(&self) -> ThinkDelimiters {
        self.delimiters.clone()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.responder)(request)
    }
}

fn words(count: usize, st: &mut ThinkerState, text: &mut String) {
    for _ in 0..count {
        text.push_str(&format!(" t{}", st.next_word));
        st.next_word += 1;
    }
}

#[derive(Debug, Default)]
struct ThinkerState {
    segment: usize,
    emitted_in_segment: usize,
    next_word: usize,
}

/// Token-level completion endpoint following a fixed thinking script.
///
/// `segments[i]` is the number of thinking tokens the model produces before
/// its `i`-th end-of-thinking delimiter; the delimiter costs one more token.
/// After the script runs out the model thinks indefinitely. Each thinking
/// token is the word ` t<n>`. Once the prompt ends with the closing delimiter
/// it answers with `answer`, one token per whitespace-separated word.
/// A prompt ending with the opening delimiter restarts the script, so one
/// instance serves sequential generations but not concurrent ones.
pub struct ScriptedThinker {
    segments: Vec<usize>,
    answer: String,
    delimiters: ThinkDelimiters,
    policy: Option<BudgetForcingPolicy>,
    state: Mutex<ThinkerState>,
}

impl ScriptedThinker {
    pub fn new(segments: Vec<usize>, answer: impl Into<String>) -> Self {
        Self {
            segments,
            answer: answer.into(),
            delimiters: ThinkDelimiters::default(),
            policy: None,
            state: Mutex::new(ThinkerState::default()),
        }
    }

    /// Makes [`super::generate`] route through budget forcing.
    pub fn with_policy(mut self, policy: BudgetForcingPolicy) -> Self {
        self.policy = Some(policy);
        self
    }
}

impl ChatEndpoint for ScriptedThinker {
    fn name(&self) -> &str {
        "scripted-thinker"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            chat: false,
            completion: true,
            tools: false,
        }
    }

    fn delimiters(&self) -> ThinkDelimiters {
        self.delimiters.clone()
    }

    fn budget_forcing(&self) -> Option<&BudgetForcingPolicy> {
        self.policy.as_ref()
    }

    fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        Err(GatewayError::Unsupported("chat"))
    }

    fn continue_text(&self, request: &ContinuationRequest) -> Result<Continuation, GatewayError> {
        if request.prompt.ends_with(&self.delimiters.close) {
            let words: Vec<&str> = self.answer.split_whitespace().collect();
            let n = words.len().min(request.max_tokens);
            return Ok(Continuation {
                text: words[..n].join(" "),
                completion_tokens: n,
                finish: if n < words.len() {
                    FinishReason::Length
                } else {
                    FinishReason::Stop
                },
            });
        }
        let mut st = self.state.lock().expect("thinker state poisoned");
        if request.prompt.ends_with(&self.delimiters.open) {
            // fresh generation
            *st = ThinkerState::default();
        }
        let mut text = String::new();
        match self.segments.get(st.segment).copied() {
            Some(len) => {
                let need = len - st.emitted_in_segment;
                if need < request.max_tokens {
                    words(need, &mut st, &mut text);
                    st.segment += 1;
                    st.emitted_in_segment = 0;
                    Ok(Continuation {
                        text,
                        completion_tokens: need + 1,
                        finish: FinishReason::Stop,
                    })
                } else {
                    words(request.max_tokens, &mut st, &mut text);
                    st.emitted_in_segment += request.max_tokens;
                    Ok(Continuation {
                        text,
                        completion_tokens: request.max_tokens,
                        finish: FinishReason::Length,
                    })
                }
            }
            None => {
                words(request.max_tokens, &mut st, &mut text);
                Ok(Continuation {
                    text,
                    completion_tokens: request.max_tokens,
                    finish: FinishReason::Length,
                })
            }
        }
    }
}
