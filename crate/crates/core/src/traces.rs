//! Reasoning-trace examples for fine-tuning: teacher prompting, assembly into
//! one chat-formatted text per query, statistics and bundle export.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_json, write_jsonl};
use crate::gateway::{
    self, render_chat_template, ChatEndpoint, ChatMessage, DecodeParams, GatewayError,
    ModelOutput, RetryPolicy, ThinkDelimiters,
};
use crate::parallel::Execution;
use crate::prompts;
use crate::retrieval::{render_context, render_sources, Retrieve, RetrievalError, RetrievalResult};
use crate::synth::SyntheticQuery;
use crate::template::{self, TemplateError};
use crate::tokenizer::Tokenizer;

pub const HISTOGRAM_BUCKET: usize = 1024;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("no retrieved documents")]
    NoContext,
    #[error("expected {expected} retrieved documents, got {got}")]
    WrongK { expected: usize, got: usize },
    #[error("retrieved documents are not in ascending score order")]
    Unsorted,
    #[error("teacher gave an empty final answer")]
    EmptyAnswer,
    #[error("teacher gave no reasoning")]
    EmptyReasoning,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExample {
    pub query: SyntheticQuery,
    pub retrieved: Vec<RetrievalResult>,
    pub reasoning: String,
    pub final_answer: String,
    pub concatenated_text: String,
    pub token_length: usize,
}

pub fn build_trace_prompt(
    query: &SyntheticQuery,
    retrieved: &[RetrievalResult],
) -> Result<String, TraceError> {
    if retrieved.is_empty() {
        return Err(TraceError::NoContext);
    }
    let prompt = template::fill(
        prompts::TRACE_PROMPT,
        &[
            ("context", &render_context(retrieved)),
            ("question", &query.symptoms_description),
            ("demographics", &query.general_demographics.render()),
            ("sources", &render_sources(retrieved)),
        ],
    )?;
    Ok(prompt)
}

/// The training text: the trace prompt as the user turn, then an assistant
/// turn holding the think-delimited reasoning followed by the answer.
pub fn concatenate(prompt: &str, reasoning: &str, answer: &str, delimiters: &ThinkDelimiters) -> String {
    let assistant = format!(
        "{}\n{}\n{}\n\n{}",
        delimiters.open, reasoning, delimiters.close, answer
    );
    render_chat_template(&[ChatMessage::user(prompt), ChatMessage::assistant(assistant)])
        .expect("two messages always render")
}

pub fn assemble_trace(
    query: &SyntheticQuery,
    retrieved: &[RetrievalResult],
    teacher_output: &ModelOutput,
    k: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<TraceExample, TraceError> {
    if retrieved.len() != k {
        return Err(TraceError::WrongK {
            expected: k,
            got: retrieved.len(),
        });
    }
    if retrieved
        .windows(2)
        .any(|w| w[0].best_score.total_cmp(&w[1].best_score).is_gt())
    {
        return Err(TraceError::Unsorted);
    }
    let answer = teacher_output.answer.trim();
    if answer.is_empty() {
        return Err(TraceError::EmptyAnswer);
    }
    let reasoning = teacher_output
        .reasoning
        .as_deref()
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .ok_or(TraceError::EmptyReasoning)?;
    let prompt = build_trace_prompt(query, retrieved)?;
    let text = concatenate(&prompt, reasoning, answer, &ThinkDelimiters::default());
    Ok(TraceExample {
        query: query.clone(),
        retrieved: retrieved.to_vec(),
        reasoning: reasoning.to_string(),
        final_answer: answer.to_string(),
        token_length: tokenizer.count_tokens(&text),
        concatenated_text: text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExclusion {
    pub condition_title: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub k: usize,
    pub execution: Execution,
    pub params: DecodeParams,
    pub retry: RetryPolicy,
    /// Extra teacher calls when the answer or reasoning comes back empty.
    pub empty_retries: u32,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            k: 5,
            execution: Execution::with_width(8),
            params: DecodeParams::default(),
            retry: RetryPolicy::default(),
            empty_retries: 0,
        }
    }
}

/// Retrieves context for each query, asks the teacher and assembles the
/// examples. Queries whose trace fails are excluded and listed.
pub fn generate_traces(
    queries: &[SyntheticQuery],
    retriever: &dyn Retrieve,
    teacher: &dyn ChatEndpoint,
    tokenizer: &dyn Tokenizer,
    options: &TraceOptions,
) -> (Vec<TraceExample>, Vec<TraceExclusion>) {
    let results = options.execution.map(queries, |q| {
        let retrieved = retriever.retrieve(&q.symptoms_description, options.k)?;
        let prompt = build_trace_prompt(q, &retrieved)?;
        let mut tries = 0;
        loop {
            let out = options.retry.run(
                |_| {
                    gateway::generate(
                        teacher,
                        vec![ChatMessage::user(prompt.clone())],
                        options.params.clone(),
                    )
                },
                GatewayError::is_transient,
            )?;
            match assemble_trace(q, &retrieved, &out, options.k, tokenizer) {
                Err(TraceError::EmptyAnswer | TraceError::EmptyReasoning)
                    if tries < options.empty_retries =>
                {
                    tries += 1;
                }
                other => return other,
            }
        }
    });
    let mut examples = Vec::new();
    let mut excluded = Vec::new();
    for (q, r) in queries.iter().zip(results) {
        match r {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                log::warn!("trace for {:?} excluded: {e}", q.condition_title);
                excluded.push(TraceExclusion {
                    condition_title: q.condition_title.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    (examples, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    /// `None` when there are no examples.
    pub mean_token_length: Option<f64>,
    pub min_token_length: Option<usize>,
    pub max_token_length: Option<usize>,
    pub bucket_width: usize,
    /// `(bucket start, count)` for non-empty buckets, ascending.
    pub histogram: Vec<(usize, usize)>,
}

pub fn stats_from_lengths(lengths: &[usize], bucket_width: usize) -> DatasetStats {
    let bucket_width = bucket_width.max(1);
    let mut buckets = std::collections::BTreeMap::new();
    for &l in lengths {
        *buckets.entry(l / bucket_width * bucket_width).or_insert(0) += 1;
    }
    let mean = (!lengths.is_empty())
        .then(|| lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64);
    DatasetStats {
        count: lengths.len(),
        mean_token_length: mean,
        min_token_length: lengths.iter().copied().min(),
        max_token_length: lengths.iter().copied().max(),
        bucket_width,
        histogram: buckets.into_iter().collect(),
    }
}

pub fn dataset_stats(examples: &[TraceExample]) -> DatasetStats {
    let lengths: Vec<usize> = examples.iter().map(|e| e.token_length).collect();
    stats_from_lengths(&lengths, HISTOGRAM_BUCKET)
}

/// Supervised fine-tuning hyperparameters written next to the examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub schedule: String,
    pub per_device_batch: u32,
    pub precision: String,
    pub block_size: usize,
    pub sharding: String,
    pub gradient_checkpointing: bool,
    pub optimizer: String,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_every_steps: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-5,
            schedule: "cosine".into(),
            per_device_batch: 1,
            precision: "bf16".into(),
            block_size: 32768,
            sharding: "full_shard auto_wrap".into(),
            gradient_checkpointing: true,
            optimizer: "adamw".into(),
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eval_every_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBundle {
    pub examples_file: PathBuf,
    pub config_file: PathBuf,
    pub stats_file: PathBuf,
    pub config: TrainingConfig,
    pub stats: DatasetStats,
    /// Examples longer than `block_size`.
    pub over_length: usize,
}

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const STATS_FILE: &str = "stats.json";

pub fn export_training_bundle(
    examples: &[TraceExample],
    out_dir: &Path,
    config: &TrainingConfig,
) -> Result<TrainingBundle, TraceError> {
    let file_err = |path: &Path, e: std::io::Error| TraceError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(out_dir).map_err(|e| file_err(out_dir, e))?;
    let mut over_length = 0;
    for (i, ex) in examples.iter().enumerate() {
        if ex.token_length > config.block_size {
            over_length += 1;
            log::warn!(
                "example {i} ({:?}) has {} tokens, above block_size {}; it will be truncated",
                ex.query.condition_title,
                ex.token_length,
                config.block_size
            );
        }
    }
    let stats = dataset_stats(examples);
    let examples_file = out_dir.join(EXAMPLES_FILE);
    let config_file = out_dir.join(CONFIG_FILE);
    let stats_file = out_dir.join(STATS_FILE);
    write_jsonl(&examples_file, examples).map_err(|e| file_err(&examples_file, e))?;
    write_json(&config_file, config).map_err(|e| file_err(&config_file, e))?;
    write_json(&stats_file, &stats).map_err(|e| file_err(&stats_file, e))?;
    Ok(TrainingBundle {
        examples_file,
        config_file,
        stats_file,
        config: config.clone(),
        stats,
        over_length,
    })
}

pub fn load_examples(path: &Path) -> Result<Vec<TraceExample>, TraceError> {
    let err = |message: String| TraceError::File {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn load_training_config(path: &Path) -> Result<TrainingConfig, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| TraceError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| TraceError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
