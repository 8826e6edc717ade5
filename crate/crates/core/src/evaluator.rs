//! Condition and disposition prediction: prompts, answer parsing, scoring,
//! aggregation over runs, report tables and the model memory estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    self, ChatEndpoint, ChatMessage, DecodeParams, GatewayError, ModelOutput, ParamType,
    RetryPolicy, ThinkDelimiters, ToolCall, ToolSchema,
};
use crate::parallel::Execution;
use crate::prompts;
use crate::retrieval::{render_context, render_sources, Retrieve, RetrievalError, RetrievalResult};
use crate::synth::{Disposition, QueryType, SyntheticQuery};
use crate::template::{self, TemplateError};

pub const INCONCLUSIVE: &str = "inconclusive";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("supply exactly one of retrieved context or the full condition list")]
    ContextSource,
    #[error("{predictions} predictions for {gold} gold queries")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("no runs to aggregate")]
    NoRuns,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// The model submits through the recommendation tool.
    Tool,
    /// The model writes `(condition, severity)`.
    #[default]
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub condition: String,
    pub disposition: Disposition,
}

impl Prediction {
    pub fn new(condition: impl Into<String>, disposition: Disposition) -> Self {
        Self {
            condition: condition.into(),
            disposition,
        }
    }

    /// `(condition, severity)` as the text prompts ask for it.
    pub fn canonical(&self) -> String {
        format!("({}, {})", self.condition, self.disposition.display())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPrompt {
    pub system: String,
    pub user: String,
    pub tools: Option<Vec<ToolSchema>>,
}

impl PredictionPrompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.system.clone()),
            ChatMessage::user(self.user.clone()),
        ]
    }
}

pub fn submit_tool_schema() -> ToolSchema {
    ToolSchema::new(
        prompts::SUBMIT_TOOL_NAME,
        "Submit the most likely condition and the severity level for the patient.",
    )
    .param(
        "condition",
        ParamType::String,
        true,
        "Title of the most likely condition, or \"inconclusive\".",
    )
    .param(
        "severity",
        ParamType::String,
        true,
        "One of \"Self-care\", \"Urgent Primary Care\", \"A&E\".",
    )
}

/// Picks the system/user template pair for the mode and context source and
/// fills it. Exactly one of `context` and `all_conditions` must be given.
pub fn build_prediction_prompt(
    mode: AnswerMode,
    context: Option<&[RetrievalResult]>,
    query: &SyntheticQuery,
    all_conditions: Option<&[String]>,
) -> Result<PredictionPrompt, EvalError> {
    let demographics = query.general_demographics.render();
    let (system, user) = match (context, all_conditions) {
        (Some(ctx), None) => {
            let (system, user) = match mode {
                AnswerMode::Tool => (
                    prompts::PREDICT_TOOL_CONTEXT_SYSTEM,
                    prompts::PREDICT_TOOL_CONTEXT_USER,
                ),
                AnswerMode::Text => (
                    prompts::PREDICT_TEXT_CONTEXT_SYSTEM,
                    prompts::PREDICT_TEXT_CONTEXT_USER,
                ),
            };
            let user = template::fill(
                user,
                &[
                    ("context", &render_context(ctx)),
                    ("question", &query.symptoms_description),
                    ("demographics", &demographics),
                    ("sources", &render_sources(ctx)),
                ],
            )?;
            (system, user)
        }
        (None, Some(conditions)) => {
            let (system, user) = match mode {
                AnswerMode::Tool => (
                    prompts::PREDICT_TOOL_NO_CONTEXT_SYSTEM,
                    prompts::PREDICT_TOOL_NO_CONTEXT_USER,
                ),
                AnswerMode::Text => (
                    prompts::PREDICT_TEXT_NO_CONTEXT_SYSTEM,
                    prompts::PREDICT_TEXT_NO_CONTEXT_USER,
                ),
            };
            let list = serde_json::to_string(conditions).expect("titles serialise");
            let user = template::fill(
                user,
                &[
                    ("conditions", &list),
                    ("question", &query.symptoms_description),
                    ("demographics", &demographics),
                ],
            )?;
            (system, user)
        }
        _ => return Err(EvalError::ContextSource),
    };
    Ok(PredictionPrompt {
        system: system.to_string(),
        user,
        tools: (mode == AnswerMode::Tool).then(|| vec![submit_tool_schema()]),
    })
}

/// Case, surrounding whitespace and quote/markup characters are ignored and
/// hyphens, underscores and runs of spaces all count as a single space.
pub fn normalise_condition(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '*' | '`' | '.' | '[' | ']'))
        .to_lowercase()
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredictionParseError {
    #[error("no (condition, severity) pair found")]
    NoPair,
    #[error("unknown severity {0:?}")]
    UnknownSeverity(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrediction {
    pub prediction: Prediction,
    /// False when the condition matched neither an allowed title nor
    /// "inconclusive"; such predictions are kept verbatim and scored wrong.
    pub known_condition: bool,
}

/// Maps a raw condition string to its allowed title (or "inconclusive").
pub fn match_condition(raw: &str, allowed: &[String]) -> Option<String> {
    let key = normalise_condition(raw);
    if key == INCONCLUSIVE {
        return Some(INCONCLUSIVE.to_string());
    }
    allowed
        .iter()
        .find(|a| normalise_condition(a) == key)
        .cloned()
}

fn resolve(condition: &str, severity: &str, allowed: &[String]) -> Result<ParsedPrediction, PredictionParseError> {
    let disposition = Disposition::parse(severity)
        .ok_or_else(|| PredictionParseError::UnknownSeverity(severity.trim().to_string()))?;
    Ok(match match_condition(condition, allowed) {
        Some(c) => ParsedPrediction {
            prediction: Prediction::new(c, disposition),
            known_condition: true,
        },
        None => ParsedPrediction {
            prediction: Prediction::new(condition.trim(), disposition),
            known_condition: false,
        },
    })
}

/// Outermost balanced `(...)` groups, as byte ranges of their contents.
fn paren_groups(text: &str) -> Vec<(usize, usize)> {
    let mut stack = Vec::new();
    let mut groups = Vec::new();
    for (i, c) in text.char_indices() {
        match c {
            '(' => stack.push(i),
            ')' => {
                if let Some(open) = stack.pop() {
                    if stack.is_empty() {
                        groups.push((open + 1, i));
                    }
                }
            }
            _ => {}
        }
    }
    groups
}

fn parse_region(text: &str, allowed: &[String]) -> Result<ParsedPrediction, PredictionParseError> {
    let mut first_error = None;
    for (start, end) in paren_groups(text).into_iter().rev() {
        let inner = &text[start..end];
        let Some(comma) = inner.rfind(',') else {
            continue;
        };
        match resolve(&inner[..comma], &inner[comma + 1..], allowed) {
            Ok(p) => return Ok(p),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap_or(PredictionParseError::NoPair))
}

/// Finds the last `(condition, severity)` pair whose severity is valid,
/// looking after the end of thinking first and then at the whole text.
pub fn parse_text_prediction(
    raw: &str,
    allowed: &[String],
) -> Result<ParsedPrediction, PredictionParseError> {
    let close = ThinkDelimiters::default().close;
    if let Some(pos) = raw.rfind(&close) {
        if let Ok(p) = parse_region(&raw[pos + close.len()..], allowed) {
            return Ok(p);
        }
    }
    parse_region(raw, allowed)
}

/// Reads a recommendation tool call.
pub fn parse_tool_prediction(
    call: &ToolCall,
    allowed: &[String],
) -> Result<ParsedPrediction, PredictionParseError> {
    if submit_tool_schema().validate(call).is_err() {
        return Err(PredictionParseError::NoPair);
    }
    let condition = call.argument_str("condition").unwrap_or_default();
    let severity = call.argument_str("severity").unwrap_or_default();
    resolve(condition, severity, allowed)
}

/// What happened for one evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub prediction: Option<Prediction>,
    #[serde(default)]
    pub unknown_condition: bool,
    #[serde(default)]
    pub call_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Whether the gold title was among the retrieved documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_retrieved: Option<bool>,
}

impl PredictionOutcome {
    pub fn parsed(p: ParsedPrediction) -> Self {
        Self {
            prediction: Some(p.prediction),
            unknown_condition: !p.known_condition,
            call_failed: false,
            error: None,
            gold_retrieved: None,
        }
    }

    pub fn known(prediction: Prediction) -> Self {
        Self::parsed(ParsedPrediction {
            prediction,
            known_condition: true,
        })
    }

    pub fn parse_failure(error: impl Into<String>) -> Self {
        Self {
            prediction: None,
            unknown_condition: false,
            call_failed: false,
            error: Some(error.into()),
            gold_retrieved: None,
        }
    }

    pub fn call_failure(error: impl Into<String>) -> Self {
        Self {
            call_failed: true,
            ..Self::parse_failure(error)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeBreakdown {
    pub n: usize,
    pub condition_accuracy: f64,
    pub disposition_accuracy: f64,
    pub underestimations: usize,
    pub overestimations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunReport {
    pub n: usize,
    pub condition_accuracy: f64,
    pub disposition_accuracy: f64,
    pub per_query_type: BTreeMap<QueryType, TypeBreakdown>,
    /// Answers with no usable pair (call failures included).
    pub parse_failures: usize,
    /// Pairs naming a condition outside the allowed list.
    pub soft_failures: usize,
    pub call_failures: usize,
    /// Predicted disposition less urgent than the gold one.
    pub underestimations: usize,
    pub overestimations: usize,
    /// Fraction of queries whose gold document was retrieved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_ceiling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling_holds: Option<bool>,
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Scores aligned predictions against gold queries. Parse failures and
/// unknown conditions count as wrong. When every outcome records whether the
/// gold document was retrieved, the retrieval ceiling is reported as well.
pub fn score_run(
    outcomes: &[PredictionOutcome],
    gold: &[SyntheticQuery],
) -> Result<EvalRunReport, EvalError> {
    if outcomes.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: outcomes.len(),
            gold: gold.len(),
        });
    }
    #[derive(Default)]
    struct Tally {
        n: usize,
        cond: usize,
        disp: usize,
        under: usize,
        over: usize,
    }
    let mut total = Tally::default();
    let mut by_type: BTreeMap<QueryType, Tally> = BTreeMap::new();
    let mut parse_failures = 0;
    let mut soft_failures = 0;
    let mut call_failures = 0;
    for (o, g) in outcomes.iter().zip(gold) {
        let t = by_type.entry(g.query_type).or_default();
        t.n += 1;
        total.n += 1;
        let Some(p) = &o.prediction else {
            parse_failures += 1;
            call_failures += usize::from(o.call_failed);
            continue;
        };
        if o.unknown_condition {
            soft_failures += 1;
        } else if normalise_condition(&p.condition) == normalise_condition(&g.condition_title) {
            t.cond += 1;
            total.cond += 1;
        }
        match p.disposition.cmp(&g.disposition) {
            std::cmp::Ordering::Equal => {
                t.disp += 1;
                total.disp += 1;
            }
            std::cmp::Ordering::Less => {
                t.under += 1;
                total.under += 1;
            }
            std::cmp::Ordering::Greater => {
                t.over += 1;
                total.over += 1;
            }
        }
    }
    let condition_accuracy = fraction(total.cond, total.n);
    let (retrieval_ceiling, ceiling_holds) =
        match outcomes.iter().map(|o| o.gold_retrieved).collect::<Option<Vec<bool>>>() {
            Some(flags) if !flags.is_empty() => {
                let ceiling = fraction(flags.iter().filter(|f| **f).count(), flags.len());
                let holds = condition_accuracy <= ceiling;
                if !holds {
                    log::error!(
                        "condition accuracy {condition_accuracy:.3} exceeds the retrieval ceiling {ceiling:.3}"
                    );
                }
                (Some(ceiling), Some(holds))
            }
            _ => (None, None),
        };
    Ok(EvalRunReport {
        n: total.n,
        condition_accuracy,
        disposition_accuracy: fraction(total.disp, total.n),
        per_query_type: by_type
            .into_iter()
            .map(|(q, t)| {
                (
                    q,
                    TypeBreakdown {
                        n: t.n,
                        condition_accuracy: fraction(t.cond, t.n),
                        disposition_accuracy: fraction(t.disp, t.n),
                        underestimations: t.under,
                        overestimations: t.over,
                    },
                )
            })
            .collect(),
        parse_failures,
        soft_failures,
        call_failures,
        underestimations: total.under,
        overestimations: total.over,
        retrieval_ceiling,
        ceiling_holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub mean_condition: f64,
    pub mean_disposition: f64,
    pub std_condition: f64,
    pub std_disposition: f64,
    /// Set when only one run was aggregated, so the deviations are 0 by fiat.
    pub single_run: bool,
}

fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs(reports: &[EvalRunReport]) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let cond: Vec<f64> = reports.iter().map(|r| r.condition_accuracy).collect();
    let disp: Vec<f64> = reports.iter().map(|r| r.disposition_accuracy).collect();
    let (mean_condition, std_condition) = mean_and_sample_std(&cond);
    let (mean_disposition, std_disposition) = mean_and_sample_std(&disp);
    Ok(AggregateReport {
        runs: reports.len(),
        mean_condition,
        mean_disposition,
        std_condition,
        std_disposition,
        single_run: reports.len() == 1,
    })
}

/// Bytes needed to hold the weights in 16-bit precision.
pub fn estimate_model_memory(param_count: u64) -> u128 {
    2 * param_count as u128
}

/// Decimal gigabytes.
pub fn bytes_to_gb(bytes: u128) -> f64 {
    bytes as f64 / 1e9
}

/// Rows of `(model, k, aggregate)`; `k = None` marks the no-retrieval baseline.
pub fn render_accuracy_table(rows: &[(&str, Option<usize>, &AggregateReport)]) -> String {
    let mut out = format!("{:<28} {:>4} {:>10} {:>12}\n", "LLM", "k", "Condition", "Disposition");
    for (model, k, agg) in rows {
        let k = k.map_or("--".to_string(), |k| k.to_string());
        out.push_str(&format!(
            "{model:<28} {k:>4} {:>10.2} {:>12.2}\n",
            agg.mean_condition, agg.mean_disposition
        ));
    }
    out
}

/// Per-query-type accuracy for each `(model, report)`.
pub fn render_query_type_table(rows: &[(&str, &EvalRunReport)]) -> String {
    let mut out = format!(
        "{:<15} {:<24} {:>10} {:>12} {:>6} {:>6}\n",
        "Type of Query", "Model", "Condition", "Disposition", "Under", "Over"
    );
    for q in QueryType::ALL {
        let label = match q {
            QueryType::Basic => "Basic",
            QueryType::Hypochondriac => "Hypochondriac",
            QueryType::Downplay => "Downplay",
        };
        for (i, (model, report)) in rows.iter().enumerate() {
            let Some(t) = report.per_query_type.get(&q) else {
                continue;
            };
            out.push_str(&format!(
                "{:<15} {model:<24} {:>10.2} {:>12.2} {:>6} {:>6}\n",
                if i == 0 { label } else { "" },
                t.condition_accuracy,
                t.disposition_accuracy,
                t.underestimations,
                t.overestimations
            ));
        }
    }
    out
}

/// `(label, parameter count, optional aggregate)` rows with the memory column.
pub fn render_model_size_table(rows: &[(&str, u64, Option<&AggregateReport>)]) -> String {
    let mut out = format!(
        "{:<24} {:>12} {:>10} {:>12}\n",
        "Model Size", "Memory (GB)", "Condition", "Disposition"
    );
    for (label, params, agg) in rows {
        let gb = bytes_to_gb(estimate_model_memory(*params));
        let (c, d) = match agg {
            Some(a) => (
                format!("{:.2}", a.mean_condition),
                format!("{:.2}", a.mean_disposition),
            ),
            None => ("-".into(), "-".into()),
        };
        out.push_str(&format!("{label:<24} {gb:>12} {c:>10} {d:>12}\n"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub mode: AnswerMode,
    /// Documents retrieved per query; ignored without a retriever.
    pub k: usize,
    pub execution: Execution,
    pub params: DecodeParams,
    pub retry: RetryPolicy,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            mode: AnswerMode::Text,
            k: 5,
            execution: Execution::with_width(8),
            params: DecodeParams::default(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRun {
    pub outcomes: Vec<PredictionOutcome>,
    pub report: EvalRunReport,
}

fn outcome_from_output(
    out: &ModelOutput,
    mode: AnswerMode,
    allowed: &[String],
) -> PredictionOutcome {
    if mode == AnswerMode::Tool {
        if let Some(call) = out.tool_calls.iter().find(|c| c.name == prompts::SUBMIT_TOOL_NAME) {
            return match parse_tool_prediction(call, allowed) {
                Ok(p) => PredictionOutcome::parsed(p),
                Err(e) => PredictionOutcome::parse_failure(e.to_string()),
            };
        }
    }
    let text = if out.raw.is_empty() { &out.answer } else { &out.raw };
    match parse_text_prediction(text, allowed) {
        Ok(p) => PredictionOutcome::parsed(p),
        Err(e) => PredictionOutcome::parse_failure(e.to_string()),
    }
}

/// One evaluation run. With a retriever each query sees its top-k documents
/// and may only name one of them; without one the model picks from
/// `all_conditions`.
pub fn run_prediction_eval(
    queries: &[SyntheticQuery],
    retriever: Option<&dyn Retrieve>,
    all_conditions: &[String],
    reasoner: &dyn ChatEndpoint,
    options: &PredictOptions,
) -> Result<PredictionRun, EvalError> {
    let outcomes = options.execution.map(queries, |q| {
        let (prompt, allowed, gold_retrieved) = match retriever {
            Some(r) => {
                let ctx = r.retrieve(&q.symptoms_description, options.k)?;
                let allowed: Vec<String> = ctx.iter().map(|c| c.doc_title.clone()).collect();
                let hit = allowed.contains(&q.condition_title);
                (
                    build_prediction_prompt(options.mode, Some(&ctx), q, None)?,
                    allowed,
                    Some(hit),
                )
            }
            None => (
                build_prediction_prompt(options.mode, None, q, Some(all_conditions))?,
                all_conditions.to_vec(),
                None,
            ),
        };
        let call = options.retry.run(
            |_| match &prompt.tools {
                Some(tools) => gateway::complete(
                    reasoner,
                    prompt.messages(),
                    Some(tools.clone()),
                    options.params.clone(),
                ),
                None => gateway::generate(reasoner, prompt.messages(), options.params.clone()),
            },
            GatewayError::is_transient,
        );
        let mut outcome = match call {
            Ok(out) => outcome_from_output(&out, options.mode, &allowed),
            Err(e) => PredictionOutcome::call_failure(e.to_string()),
        };
        outcome.gold_retrieved = gold_retrieved;
        Ok::<_, EvalError>(outcome)
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = score_run(&outcomes, queries)?;
    Ok(PredictionRun { outcomes, report })
}
