//! The document collection: one JSON object per line with `title`,
//! `full_content` and an optional LLM-written `summary`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, ChatEndpoint, ChatMessage, DecodeParams, GatewayError, RetryPolicy};
use crate::parallel::Execution;
use crate::template::{self, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub title: String,
    pub full_content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

impl CorpusRecord {
    pub fn new(title: impl Into<String>, full_content: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            full_content: full_content.into(),
            summary: None,
        }
    }

    pub fn with_summary(mut self, summary: impl Into<String>) -> Self {
        self.summary = Some(summary.into());
        self
    }

    fn problem(&self) -> Option<&'static str> {
        if self.title.trim().is_empty() {
            Some("empty title")
        } else if self.full_content.is_empty() {
            Some("empty full_content")
        } else if self.summary.as_deref().is_some_and(str::is_empty) {
            Some("empty summary")
        } else {
            None
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid record: {reason}")]
    Invalid { line: usize, reason: &'static str },
    #[error("line {line}: duplicate title `{title}`")]
    DuplicateTitle { line: usize, title: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a corpus file. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(reason) = record.problem() {
            return Err(CorpusError::Invalid {
                line: line_no,
                reason,
            });
        }
        if !seen.insert(record.title.clone()) {
            return Err(CorpusError::DuplicateTitle {
                line: line_no,
                title: record.title,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes any serialisable rows as JSON Lines via a temp file and rename.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        for row in rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)
}

/// Writes one pretty-printed JSON document via a temp file and rename.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    write_jsonl(path, records).map_err(io_err(path))
}

/// Drops records whose title is in `titles`, keeping the order of the rest.
pub fn exclude_records<S: AsRef<str>>(records: Vec<CorpusRecord>, titles: &[S]) -> Vec<CorpusRecord> {
    let drop: HashSet<&str> = titles.iter().map(AsRef::as_ref).collect();
    records
        .into_iter()
        .filter(|r| !drop.contains(r.title.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFailure {
    pub title: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarisationReport {
    pub record_count: usize,
    pub summarised_count: usize,
    /// Mean of summary length over original length (in characters) across
    /// summarised records. `None` when nothing was summarised.
    pub mean_reduction_ratio: Option<f64>,
    pub per_record_ratios: Vec<f64>,
    pub failures: Vec<SummaryFailure>,
}

#[derive(Debug, Clone)]
pub struct SummariseOptions {
    pub retry: RetryPolicy,
    pub execution: Execution,
    pub params: DecodeParams,
}

impl Default for SummariseOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            execution: Execution::with_width(8),
            params: DecodeParams::default(),
        }
    }
}

#[derive(Debug, Error)]
enum SummaryAttemptError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("endpoint returned an empty summary")]
    Empty,
}

pub fn reduction_ratio(full: &str, summary: &str) -> f64 {
    let full_len = full.chars().count();
    if full_len == 0 {
        return 0.0;
    }
    summary.chars().count() as f64 / full_len as f64
}

/// Asks `llm` for one summary per record. Failed records keep no summary and
/// are listed in the report; the output order always matches the input.
pub fn summarise_corpus(
    records: &[CorpusRecord],
    llm: &dyn ChatEndpoint,
    prompt_template: &str,
    options: &SummariseOptions,
) -> Result<(Vec<CorpusRecord>, SummarisationReport), CorpusError> {
    // fails when the template has no {document} slot
    template::fill(prompt_template, &[("document", "")])?;
    let results = options.execution.map(records, |record| {
        let prompt = template::fill(prompt_template, &[("document", &record.full_content)])?;
        let outcome = options.retry.run(
            |_| {
                let out = gateway::complete(
                    llm,
                    vec![ChatMessage::user(prompt.clone())],
                    None,
                    options.params.clone(),
                )?;
                let summary = out.answer.trim().to_string();
                if summary.is_empty() {
                    Err(SummaryAttemptError::Empty)
                } else {
                    Ok(summary)
                }
            },
            |e| match e {
                SummaryAttemptError::Gateway(g) => g.is_transient(),
                SummaryAttemptError::Empty => true,
            },
        );
        Ok::<_, CorpusError>(outcome)
    });

    let mut out = Vec::with_capacity(records.len());
    let mut ratios = Vec::new();
    let mut failures = Vec::new();
    for (record, result) in records.iter().zip(results) {
        let mut record = record.clone();
        match result? {
            Ok(summary) => {
                let ratio = reduction_ratio(&record.full_content, &summary);
                if ratio >= 1.0 {
                    log::warn!(
                        "summary of `{}` is not shorter than the document (ratio {ratio:.2})",
                        record.title
                    );
                }
                ratios.push(ratio);
                record.summary = Some(summary);
            }
            Err(e) => {
                failures.push(SummaryFailure {
                    title: record.title.clone(),
                    error: e.to_string(),
                });
                record.summary = None;
            }
        }
        out.push(record);
    }
    let mean = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let report = SummarisationReport {
        record_count: records.len(),
        summarised_count: ratios.len(),
        mean_reduction_ratio: mean,
        per_record_ratios: ratios,
        failures,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts;
    use crate::gateway::scripted::ScriptedChat;
    use crate::gateway::{ChatResponse, Role};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn opts() -> SummariseOptions {
        SummariseOptions {
            retry: RetryPolicy::immediate(3),
            ..SummariseOptions::default()
        }
    }

    #[test]
    fn loads_two_lines_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"title\":\"b\",\"full_content\":\"x\",\"summary\":\"s\"}\n{\"title\":\"a\",\"full_content\":\"y\"}\n",
        );
        let recs = load_corpus(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].title, "b");
        assert_eq!(recs[0].summary.as_deref(), Some("s"));
        assert_eq!(recs[1].summary, None);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "");
        assert!(load_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"title\":\"a\",\"full_content\":\"y\"}\n{oops\n",
        );
        assert!(matches!(load_corpus(&p), Err(CorpusError::Malformed { line: 2, .. })));
    }

    #[test]
    fn duplicate_title_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"title\":\"a\",\"full_content\":\"y\"}\n{\"title\":\"a\",\"full_content\":\"z\"}\n",
        );
        assert!(matches!(
            load_corpus(&p),
            Err(CorpusError::DuplicateTitle { line: 2, .. })
        ));
        assert!(matches!(
            load_corpus(&dir.path().join("missing.jsonl")),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn empty_fields_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"title\":\"a\",\"full_content\":\"\"}\n");
        assert!(matches!(load_corpus(&p), Err(CorpusError::Invalid { line: 1, .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let recs = vec![
            CorpusRecord::new("Flu", "Fever and aches.\nRest.").with_summary("Fever."),
            CorpusRecord::new("Hip pain", "Pain in the hip \"quoted\" ünïcode"),
        ];
        write_corpus(&p, &recs).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), recs);
    }

    #[test]
    fn exclusion() {
        let recs: Vec<_> = ["a", "Mental Health", "c"]
            .iter()
            .map(|t| CorpusRecord::new(*t, "x"))
            .collect();
        let kept = exclude_records(recs.clone(), &["Mental Health"]);
        assert_eq!(kept.iter().map(|r| r.title.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(exclude_records(recs.clone(), &["zzz"]), recs);
        assert!(exclude_records(recs, &["a", "Mental Health", "c"]).is_empty());
    }

    #[test]
    fn scripted_summaries_and_report() {
        let recs = vec![
            CorpusRecord::new("a", "x".repeat(1000)),
            CorpusRecord::new("b", "y".repeat(100)),
        ];
        let ep = ScriptedChat::always_text("SUMMARY");
        let (out, report) =
            summarise_corpus(&recs, &ep, prompts::SUMMARISATION_PROMPT, &opts()).unwrap();
        assert!(out.iter().all(|r| r.summary.as_deref() == Some("SUMMARY")));
        assert_eq!(report.summarised_count, 2);
        assert!((report.per_record_ratios[0] - 0.007).abs() < 1e-12);

        let ep = ScriptedChat::always_text("z".repeat(150));
        let (_, report) = summarise_corpus(&recs[..1], &ep, "{document}", &opts()).unwrap();
        assert!((report.per_record_ratios[0] - 0.15).abs() < 1e-12);
        assert!((report.mean_reduction_ratio.unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn summarisation_is_idempotent_for_a_deterministic_endpoint() {
        let recs = vec![CorpusRecord::new("a", "one two three four")];
        let ep = ScriptedChat::new(|req| {
            let doc = req.last_content(Role::User).unwrap();
            Ok(ChatResponse::text(doc.split_whitespace().last().unwrap()))
        });
        let (once, _) = summarise_corpus(&recs, &ep, "{document}", &opts()).unwrap();
        let (twice, _) = summarise_corpus(&once, &ep, "{document}", &opts()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn failures_are_retried_then_recorded() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let ep = ScriptedChat::new(move |req| {
            c.fetch_add(1, Ordering::SeqCst);
            if req.last_content(Role::User).unwrap().contains("bad") {
                Err(GatewayError::Status {
                    status: 503,
                    body: "down".into(),
                })
            } else {
                Ok(ChatResponse::text("ok"))
            }
        });
        let recs = vec![CorpusRecord::new("a", "bad doc"), CorpusRecord::new("b", "good doc")];
        let options = SummariseOptions {
            execution: Execution::Sequential,
            ..opts()
        };
        let (out, report) = summarise_corpus(&recs, &ep, "{document}", &options).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 4);
        assert_eq!(out[0].summary, None);
        assert_eq!(out[1].summary.as_deref(), Some("ok"));
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].title, "a");
    }

    #[test]
    fn empty_summary_is_a_failure() {
        let ep = ScriptedChat::always_text("   ");
        let recs = vec![CorpusRecord::new("a", "doc")];
        let (out, report) = summarise_corpus(&recs, &ep, "{document}", &opts()).unwrap();
        assert_eq!(out[0].summary, None);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.mean_reduction_ratio, None);
    }

    #[test]
    fn template_without_document_placeholder_is_rejected() {
        let ep = ScriptedChat::always_text("s");
        let recs = vec![CorpusRecord::new("a", "doc")];
        assert!(summarise_corpus(&recs, &ep, "no placeholder", &opts()).is_err());
    }
}
