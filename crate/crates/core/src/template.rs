//! Single-pass `{name}` placeholder substitution.
//!
//! Only the names passed in are treated as placeholders, so literal JSON braces
//! in a template survive. Substituted values are never rescanned.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template placeholder {{{0}}} has no value")]
    Unresolved(String),
    #[error("value supplied for {{{0}}} but the template never uses it")]
    Unused(String),
}

/// Replaces every `{key}` occurrence for the supplied keys. Errors if a
/// supplied key never appears in the template.
pub fn fill(template: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut used = vec![false; values.len()];
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .position(|(k, _)| *k == name)
                .map(|i| (i, close))
        });
        match hit {
            Some((i, close)) => {
                out.push_str(values[i].1);
                used[i] = true;
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(TemplateError::Unused(values[i].0.to_string()));
    }
    Ok(out)
}

/// Names in `known` that still appear as `{name}` in `text`.
pub fn unresolved<'a>(text: &str, known: &[&'a str]) -> Vec<&'a str> {
    known
        .iter()
        .copied()
        .filter(|k| text.contains(&format!("{{{k}}}")))
        .collect()
}

/// Fails with [`TemplateError::Unresolved`] when any of `known` survived.
pub fn ensure_resolved(text: &str, known: &[&str]) -> Result<(), TemplateError> {
    match unresolved(text, known).first() {
        Some(k) => Err(TemplateError::Unresolved(k.to_string())),
        None => Ok(()),
    }
}
