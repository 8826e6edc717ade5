//! Budget forcing: controlling how long a reasoning model thinks.
//!
//! While the model is thinking, an emitted end-of-thinking delimiter is
//! dropped and the continuation text appended instead, up to
//! `max_suppressions` times. Once the model has generated `max_think_tokens`
//! thinking tokens the delimiter is inserted for it and the answer phase
//! starts. Both counters only grow, so the loop always terminates.

use serde::{Deserialize, Serialize};

use super::{
    parse_reasoning, ChatEndpoint, ContinuationRequest, FinishReason, GatewayError, ModelOutput,
    ThinkDelimiters, TokenUsage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetForcingPolicy {
    pub max_think_tokens: usize,
    pub max_suppressions: usize,
    pub continuation_text: String,
    /// Overrides the endpoint's closing delimiter when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_of_thinking_delimiter: Option<String>,
}

impl Default for BudgetForcingPolicy {
    fn default() -> Self {
        Self {
            max_think_tokens: 1024,
            max_suppressions: 3,
            continuation_text: "Wait".into(),
            end_of_thinking_delimiter: None,
        }
    }
}

impl BudgetForcingPolicy {
    pub fn check(&self) -> Result<(), GatewayError> {
        if self.max_think_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_think_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetForcedOutput {
    pub output: ModelOutput,
    /// Tokens generated during the thinking phase, suppressed delimiters included.
    pub thinking_tokens: usize,
    pub suppressions: usize,
    /// Times the model produced the delimiter while thinking.
    pub delimiter_emissions: usize,
    /// Thinking ended because the budget ran out.
    pub forced_termination: bool,
}

/// Runs the thinking/answer state machine against a prefix-continuation
/// endpoint. `prompt` should already end with an open assistant turn.
pub fn budget_forced_generate(
    endpoint: &dyn ChatEndpoint,
    prompt: &str,
    policy: &BudgetForcingPolicy,
    answer_max_tokens: usize,
) -> Result<BudgetForcedOutput, GatewayError> {
    if !endpoint.capabilities().completion {
        return Err(GatewayError::Unsupported("prefix continuation"));
    }
    policy.check()?;
    let mut delimiters: ThinkDelimiters = endpoint.delimiters();
    if let Some(close) = &policy.end_of_thinking_delimiter {
        delimiters.close = close.clone();
    }

    let mut thinking = String::new();
    let mut thinking_tokens = 0usize;
    let mut suppressions = 0usize;
    let mut emissions = 0usize;
    let mut forced = false;

    loop {
        let remaining = policy.max_think_tokens.saturating_sub(thinking_tokens);
        if remaining == 0 {
            forced = true;
            break;
        }
        let step = endpoint.continue_text(&ContinuationRequest {
            prompt: format!("{prompt}{}{thinking}", delimiters.open),
            max_tokens: remaining,
            stop: vec![delimiters.close.clone()],
            temperature: None,
        })?;
        thinking_tokens += step.completion_tokens;
        thinking.push_str(&step.text);
        match step.finish {
            FinishReason::Stop => {
                emissions += 1;
                if suppressions < policy.max_suppressions {
                    suppressions += 1;
                    thinking.push_str(&policy.continuation_text);
                } else {
                    break;
                }
            }
            FinishReason::Length => {
                // A short count without a stop means the endpoint capped the
                // step itself; either way the budget is treated as spent.
                forced = true;
                break;
            }
        }
    }

    let answer_step = endpoint.continue_text(&ContinuationRequest {
        prompt: format!("{prompt}{}{thinking}{}", delimiters.open, delimiters.close),
        max_tokens: answer_max_tokens,
        stop: Vec::new(),
        temperature: None,
    })?;

    let raw = format!(
        "{}{thinking}{}{}",
        delimiters.open, delimiters.close, answer_step.text
    );
    let parsed = parse_reasoning(&raw, &delimiters);
    let usage = TokenUsage {
        prompt_tokens: 0,
        completion_tokens: (thinking_tokens + answer_step.completion_tokens) as u64,
    };
    Ok(BudgetForcedOutput {
        output: ModelOutput {
            reasoning: parsed.reasoning,
            answer: parsed.answer,
            tool_calls: Vec::new(),
            raw,
            usage,
            unterminated: parsed.unterminated,
        },
        thinking_tokens,
        suppressions,
        delimiter_emissions: emissions,
        forced_termination: forced,
    })
}
