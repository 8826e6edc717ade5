//! ChatML rendering (`<|im_start|>{role}\n{content}<|im_end|>`).

use thiserror::Error;

use super::message::ChatMessage;

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateRenderError {
    #[error("cannot render an empty message list")]
    Empty,
}

/// A message whose content contains a template delimiter. Rendering passes it
/// through unchanged, which lets the content forge turn boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelimiterLint {
    pub message_index: usize,
    pub delimiter: &'static str,
}

pub fn lint_messages(messages: &[ChatMessage]) -> Vec<DelimiterLint> {
    let mut lints = Vec::new();
    for (i, m) in messages.iter().enumerate() {
        for d in [IM_START, IM_END] {
            if m.content.contains(d) {
                lints.push(DelimiterLint {
                    message_index: i,
                    delimiter: d,
                });
            }
        }
    }
    lints
}

fn render_block(m: &ChatMessage, out: &mut String) {
    out.push_str(IM_START);
    out.push_str(m.role.as_str());
    out.push('\n');
    out.push_str(&m.content);
    for call in &m.tool_calls {
        let body = serde_json::json!({ "name": call.name, "arguments": call.arguments });
        out.push_str("\n<tool_call>\n");
        out.push_str(&body.to_string());
        out.push_str("\n</tool_call>");
    }
    out.push_str(IM_END);
}

/// Renders messages as newline-joined ChatML blocks. Content is emitted
/// verbatim; delimiter collisions are logged, not escaped.
pub fn render_chat_template(messages: &[ChatMessage]) -> Result<String, TemplateRenderError> {
    if messages.is_empty() {
        return Err(TemplateRenderError::Empty);
    }
    for lint in lint_messages(messages) {
        log::warn!(
            "message {} contains template delimiter {}",
            lint.message_index,
            lint.delimiter
        );
    }
    let mut out = String::new();
    for (i, m) in messages.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_block(m, &mut out);
    }
    Ok(out)
}

/// Rendered transcript followed by an open assistant turn, ready for
/// completion-style decoding.
pub fn render_generation_prompt(messages: &[ChatMessage]) -> Result<String, TemplateRenderError> {
    let mut out = render_chat_template(messages)?;
    out.push('\n');
    out.push_str(IM_START);
    out.push_str("assistant\n");
    Ok(out)
}
