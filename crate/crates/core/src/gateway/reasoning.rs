use serde::{Deserialize, Serialize};

/// Markers wrapping a reasoning trace in model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkDelimiters {
    pub open: String,
    pub close: String,
}

impl Default for ThinkDelimiters {
    fn default() -> Self {
        Self {
            open: "<think>".into(),
            close: "</think>".into(),
        }
    }
}

impl ThinkDelimiters {
    pub fn wrap(&self, reasoning: &str, answer: &str) -> String {
        format!("{}{reasoning}{}{answer}", self.open, self.close)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReasoning {
    pub reasoning: Option<String>,
    pub answer: String,
    /// Open delimiter without a matching close.
    pub unterminated: bool,
}

/// Splits raw output into reasoning and answer.
///
/// Text between the first open delimiter and the next close delimiter is the
/// reasoning; what follows the close is the answer. Non-whitespace text before
/// the open delimiter is kept at the front of the answer. A close with no open
/// (the open was part of the prompt) treats everything before it as reasoning.
pub fn parse_reasoning(raw: &str, delimiters: &ThinkDelimiters) -> ParsedReasoning {
    let (open, close) = (delimiters.open.as_str(), delimiters.close.as_str());
    let open_at = (!open.is_empty()).then(|| raw.find(open)).flatten();
    match open_at {
        Some(start) => {
            let prefix = &raw[..start];
            let body = &raw[start + open.len()..];
            match body.find(close).filter(|_| !close.is_empty()) {
                Some(end) => {
                    let after = &body[end + close.len()..];
                    let answer = if prefix.trim().is_empty() {
                        after.to_string()
                    } else {
                        format!("{prefix}{after}")
                    };
                    ParsedReasoning {
                        reasoning: Some(body[..end].to_string()),
                        answer,
                        unterminated: false,
                    }
                }
                None => ParsedReasoning {
                    reasoning: Some(body.to_string()),
                    answer: if prefix.trim().is_empty() {
                        String::new()
                    } else {
                        prefix.to_string()
                    },
                    unterminated: true,
                },
            }
        }
        None => match (!close.is_empty()).then(|| raw.find(close)).flatten() {
            Some(end) => ParsedReasoning {
                reasoning: Some(raw[..end].to_string()),
                answer: raw[end + close.len()..].to_string(),
                unterminated: false,
            },
            None => ParsedReasoning {
                reasoning: None,
                answer: raw.to_string(),
                unterminated: false,
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d() -> ThinkDelimiters {
        ThinkDelimiters::default()
    }

    #[test]
    fn basic_split() {
        let p = parse_reasoning("<think>a</think>b", &d());
        assert_eq!(p.reasoning.as_deref(), Some("a"));
        assert_eq!(p.answer, "b");
        assert!(!p.unterminated);
    }

    #[test]
    fn no_delimiters() {
        let p = parse_reasoning("plain", &d());
        assert_eq!(p.reasoning, None);
        assert_eq!(p.answer, "plain");
    }

    #[test]
    fn unterminated_reasoning() {
        let p = parse_reasoning("<think>only", &d());
        assert_eq!(p.reasoning.as_deref(), Some("only"));
        assert_eq!(p.answer, "");
        assert!(p.unterminated);
    }

    #[test]
    fn close_without_open() {
        let p = parse_reasoning("thinking...</think>\nanswer", &d());
        assert_eq!(p.reasoning.as_deref(), Some("thinking..."));
        assert_eq!(p.answer, "\nanswer");
    }

    #[test]
    fn leading_text_is_kept() {
        let p = parse_reasoning("Sure. <think>x</think> y", &d());
        assert_eq!(p.answer, "Sure.  y");
        let p = parse_reasoning("\n<think>x</think>y", &d());
        assert_eq!(p.answer, "y");
    }

    #[test]
    fn custom_delimiters() {
        let delims = ThinkDelimiters {
            open: "<|think|>".into(),
            close: "<|answer|>".into(),
        };
        let p = parse_reasoning("<|think|>r<|answer|>a", &delims);
        assert_eq!((p.reasoning.as_deref(), p.answer.as_str()), (Some("r"), "a"));
    }

    proptest! {
        #[test]
        fn wrap_then_parse_is_identity(r in "[^<>]*", a in "[^<>]*") {
            let p = parse_reasoning(&d().wrap(&r, &a), &d());
            prop_assert_eq!(p.reasoning, Some(r));
            prop_assert_eq!(p.answer, a);
        }
    }
}
