//! `leanrag` subcommands, one per pipeline stage.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use leanrag_core::corpus::{
    exclude_records, load_corpus, summarise_corpus, write_corpus, write_json, write_jsonl,
    CorpusRecord, SummariseOptions,
};
use leanrag_core::evaluator::{
    aggregate_runs, render_accuracy_table, render_query_type_table, run_prediction_eval,
    AnswerMode, PredictOptions,
};
use leanrag_core::orchestrator::OrchestratorConfig;
use leanrag_core::prompts;
use leanrag_core::retrieval::{
    build_index, evaluate_p_at_k, render_p_at_k, RetrievalMode, Retriever, VectorIndex,
    DEFAULT_CUTOFFS,
};
use leanrag_core::synth::{dedup_split, generate_to_target, load_query_set, GenerationOptions};
use leanrag_core::traces::{export_training_bundle, generate_traces, load_examples, TraceOptions};
use serde_json::json;

use crate::api::{router, AppState, ChatBackend};
use crate::config::{AppConfig, Role};
use crate::store::ThreadStore;

#[derive(Debug, Parser)]
#[command(name = "leanrag", version, about = "Retrieval-augmented reasoning pipeline and chat service")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus (JSONL, or a directory of .txt/.md pages) and write JSONL.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File with one title per line to leave out.
        #[arg(long)]
        exclude: Option<PathBuf>,
    },
    /// Add an LLM summary to every record.
    Summarise {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt template with a {document} slot.
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Where to write the summarisation report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed the corpus and write a vector index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Generate synthetic patient queries.
    GenQueries {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop generated queries whose (condition, disposition) appears here.
        #[arg(long)]
        dedup_against: Option<PathBuf>,
        /// Where to write teacher refusals (JSONL).
        #[arg(long)]
        refusals: Option<PathBuf>,
    },
    /// Retrieve context and collect teacher reasoning traces.
    GenTraces {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the fine-tuning bundle: examples, training config and statistics.
    ExportTrain {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report p@k of an index against labelled queries.
    EvalRetrieval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CUTOFFS.to_vec())]
        k: Vec<usize>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score condition and disposition predictions of the reasoner.
    EvalPredict {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Retrieve context from this index; without it the model sees the
        /// full condition list instead.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = AnswerArg::Text)]
        mode: AnswerArg,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the chat REST API.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Summaries,
    FullPages,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnswerArg {
    Text,
    Tool,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    match cli.command {
        Command::Ingest { input, out, exclude } => ingest(&input, &out, exclude.as_deref()),
        Command::Summarise {
            corpus,
            out,
            prompt,
            report,
        } => summarise(&config, &corpus, &out, prompt.as_deref(), report.as_deref()),
        Command::Index { corpus, out, mode } => index(&config, &corpus, &out, mode),
        Command::GenQueries {
            corpus,
            out,
            n,
            seed,
            dedup_against,
            refusals,
        } => gen_queries(&config, &corpus, &out, n, seed, dedup_against.as_deref(), refusals.as_deref()),
        Command::GenTraces {
            corpus,
            index,
            queries,
            out,
            k,
        } => gen_traces(&config, &corpus, &index, &queries, &out, k),
        Command::ExportTrain { traces, out } => export_train(&config, &traces, &out),
        Command::EvalRetrieval {
            index,
            queries,
            k,
            label,
            out,
        } => eval_retrieval(&config, &index, &queries, &k, label, out.as_deref()),
        Command::EvalPredict {
            queries,
            corpus,
            index,
            k,
            mode,
            runs,
            label,
            out,
        } => eval_predict(&config, &queries, &corpus, index.as_deref(), k, mode, runs, label, out.as_deref()),
        Command::Serve {
            host,
            port,
            corpus,
            index,
            store,
        } => {
            let mut server = config.server.clone();
            server.host = host.unwrap_or(server.host);
            server.port = port.unwrap_or(server.port);
            server.corpus = corpus.or(server.corpus);
            server.index = index.or(server.index);
            server.store = store.or(server.store);
            serve(&AppConfig { server, ..config })
        }
    }
}

fn read_pages(dir: &Path) -> anyhow::Result<Vec<CorpusRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "md")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let title = p
                .file_stem()
                .and_then(|s| s.to_str())
                .context("page file name is not UTF-8")?
                .to_string();
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CorpusRecord::new(title, text.trim().to_string()))
        })
        .collect()
}

fn ingest(input: &Path, out: &Path, exclude: Option<&Path>) -> anyhow::Result<()> {
    let records = if input.is_dir() {
        let records = read_pages(input)?;
        // round-trip through the loader so directory input gets the same checks
        let tmp = tempfile_path(out);
        write_corpus(&tmp, &records)?;
        let checked = load_corpus(&tmp);
        let _ = std::fs::remove_file(&tmp);
        checked?
    } else {
        load_corpus(input)?
    };
    let before = records.len();
    let records = match exclude {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let titles: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            exclude_records(records, &titles)
        }
        None => records,
    };
    write_corpus(out, &records)?;
    println!("ingested {} records ({} excluded) into {}", records.len(), before - records.len(), out.display());
    Ok(())
}

fn tempfile_path(near: &Path) -> PathBuf {
    let mut p = near.as_os_str().to_owned();
    p.push(".ingest.tmp");
    PathBuf::from(p)
}

fn summarise(
    config: &AppConfig,
    corpus: &Path,
    out: &Path,
    prompt: Option<&Path>,
    report: Option<&Path>,
) -> anyhow::Result<()> {
    let records = load_corpus(corpus)?;
    let llm = config.endpoint(Role::Summariser)?;
    let template = match prompt {
        Some(p) => std::fs::read_to_string(p)?,
        None => prompts::SUMMARISATION_PROMPT.to_string(),
    };
    let options = SummariseOptions {
        execution: config.execution(),
        ..SummariseOptions::default()
    };
    let (records, rep) = summarise_corpus(&records, llm.as_ref(), &template, &options)?;
    write_corpus(out, &records)?;
    if let Some(path) = report {
        write_json(path, &rep)?;
    }
    let ratio = rep
        .mean_reduction_ratio
        .map_or("n/a".to_string(), |r| format!("{r:.3}"));
    println!(
        "summarised {}/{} records, mean length ratio {ratio}, {} failures",
        rep.summarised_count,
        rep.record_count,
        rep.failures.len()
    );
    Ok(())
}

fn index(config: &AppConfig, corpus: &Path, out: &Path, mode: Option<ModeArg>) -> anyhow::Result<()> {
    let records = load_corpus(corpus)?;
    let mut retrieval = config.retrieval.clone();
    if let Some(m) = mode {
        retrieval.mode = match m {
            ModeArg::Summaries => RetrievalMode::Summaries,
            ModeArg::FullPages => RetrievalMode::FullPages,
        };
    }
    retrieval.embed_batch_size = config.embed_batch_size();
    let embedder = config.embedder()?;
    let index = build_index(&records, &retrieval, embedder.as_ref(), config.execution())?;
    index.save(out)?;
    println!(
        "wrote {} vectors of dimension {} ({:?}) to {}",
        index.len(),
        index.dimension(),
        retrieval.mode,
        out.display()
    );
    Ok(())
}

fn gen_queries(
    config: &AppConfig,
    corpus: &Path,
    out: &Path,
    n: usize,
    seed: u64,
    dedup_against: Option<&Path>,
    refusals_out: Option<&Path>,
) -> anyhow::Result<()> {
    let records = load_corpus(corpus)?;
    let llm = config.endpoint(Role::Generator)?;
    let options = GenerationOptions {
        execution: config.execution(),
        ..GenerationOptions::default()
    };
    let set = generate_to_target(&records, llm.as_ref(), n, seed, &HashSet::new(), &options)?;
    let mut queries = set.queries;
    let mut removed = 0;
    if let Some(path) = dedup_against {
        let eval = load_query_set(path)?;
        let (kept, dropped) = dedup_split(&eval, &queries);
        removed = dropped.len();
        queries = kept;
    }
    write_jsonl(out, &queries)?;
    if let Some(path) = refusals_out {
        write_jsonl(path, &set.refusals)?;
    }
    println!(
        "wrote {} queries to {} ({} attempts, {} refusals, {} failures, {} removed as overlapping)",
        queries.len(),
        out.display(),
        set.attempts,
        set.refusals.len(),
        set.failures.len(),
        removed
    );
    Ok(())
}

fn load_retriever(config: &AppConfig, corpus: &Path, index: &Path) -> anyhow::Result<Retriever> {
    let records = load_corpus(corpus)?;
    let index = VectorIndex::load(index)?;
    let embedder = config.embedder()?;
    if embedder.dimension() != index.dimension() {
        bail!(
            "index has dimension {} but the configured embedder produces {}",
            index.dimension(),
            embedder.dimension()
        );
    }
    Ok(Retriever::new(index, records, embedder)?)
}

fn gen_traces(
    config: &AppConfig,
    corpus: &Path,
    index: &Path,
    queries: &Path,
    out: &Path,
    k: Option<usize>,
) -> anyhow::Result<()> {
    let retriever = load_retriever(config, corpus, index)?;
    let queries = load_query_set(queries)?;
    let teacher = config.endpoint(Role::Teacher)?;
    let tokenizer = config.retrieval.tokenizer.build();
    let options = TraceOptions {
        k: k.unwrap_or(config.retrieval.k),
        execution: config.execution(),
        ..TraceOptions::default()
    };
    let (examples, excluded) =
        generate_traces(&queries, &retriever, teacher.as_ref(), tokenizer.as_ref(), &options);
    write_jsonl(out, &examples)?;
    println!(
        "wrote {} traces to {} ({} excluded)",
        examples.len(),
        out.display(),
        excluded.len()
    );
    Ok(())
}

fn export_train(config: &AppConfig, traces: &Path, out: &Path) -> anyhow::Result<()> {
    let examples = load_examples(traces)?;
    let bundle = export_training_bundle(&examples, out, &config.training)?;
    let mean = bundle
        .stats
        .mean_token_length
        .map_or("n/a".to_string(), |m| format!("{m:.0}"));
    println!(
        "exported {} examples to {} (mean {mean} tokens, {} above block size)",
        bundle.stats.count,
        out.display(),
        bundle.over_length
    );
    Ok(())
}

fn eval_retrieval(
    config: &AppConfig,
    index: &Path,
    queries: &Path,
    cutoffs: &[usize],
    label: Option<String>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let index = VectorIndex::load(index)?;
    let embedder = config.embedder()?;
    let pairs: Vec<(String, String)> = load_query_set(queries)?
        .into_iter()
        .map(|q| (q.symptoms_description, q.condition_title))
        .collect();
    let table = evaluate_p_at_k(
        &index,
        &pairs,
        cutoffs,
        embedder.as_ref(),
        config.embed_batch_size(),
        config.execution(),
    )?;
    let label = label.unwrap_or_else(|| match index.mode() {
        RetrievalMode::Summaries => "Summaries".into(),
        RetrievalMode::FullPages => "Full pages".into(),
    });
    print!("{}", render_p_at_k(&[(&label, index.len(), &table)]));
    if let Some(path) = out {
        write_json(path, &table)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_predict(
    config: &AppConfig,
    queries: &Path,
    corpus: &Path,
    index: Option<&Path>,
    k: Option<usize>,
    mode: AnswerArg,
    runs: usize,
    label: Option<String>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let queries = load_query_set(queries)?;
    let retriever = match index {
        Some(i) => Some(load_retriever(config, corpus, i)?),
        None => None,
    };
    let titles: Vec<String> = load_corpus(corpus)?.into_iter().map(|r| r.title).collect();
    let reasoner = config.endpoint(Role::Reasoner)?;
    let k = k.unwrap_or(config.retrieval.k);
    let options = PredictOptions {
        mode: match mode {
            AnswerArg::Text => AnswerMode::Text,
            AnswerArg::Tool => AnswerMode::Tool,
        },
        k,
        execution: config.execution(),
        ..PredictOptions::default()
    };
    let mut reports = Vec::with_capacity(runs);
    for run in 0..runs {
        let result = run_prediction_eval(
            &queries,
            retriever.as_ref().map(|r| r as _),
            &titles,
            reasoner.as_ref(),
            &options,
        )?;
        log::info!(
            "run {}: condition {:.3}, disposition {:.3}",
            run + 1,
            result.report.condition_accuracy,
            result.report.disposition_accuracy
        );
        reports.push(result.report);
    }
    let aggregate = aggregate_runs(&reports)?;
    let label = label.unwrap_or_else(|| reasoner.name().to_string());
    let shown_k = retriever.as_ref().map(|_| k);
    print!("{}", render_accuracy_table(&[(&label, shown_k, &aggregate)]));
    print!("{}", render_query_type_table(&[(&label, &reports[0])]));
    if let Some(path) = out {
        write_json(path, &json!({ "aggregate": aggregate, "runs": reports }))?;
    }
    Ok(())
}

fn serve(config: &AppConfig) -> anyhow::Result<()> {
    let server = &config.server;
    let (Some(corpus), Some(index)) = (&server.corpus, &server.index) else {
        bail!("serve needs a corpus and an index (--corpus/--index or [server] in the config)");
    };
    let store = match &server.store {
        Some(p) => ThreadStore::open(p)?,
        None => {
            log::warn!("no thread store configured; conversations are lost on exit");
            ThreadStore::in_memory()
        }
    };
    // Blocking HTTP clients must be created, and finally dropped, outside the
    // async runtime, so the state is built here and outlives it.
    let state = Arc::new(AppState {
        store: Arc::new(store),
        backend: ChatBackend {
            agent: config.endpoint(Role::Agent)?,
            reasoner: config.endpoint(Role::Reasoner)?,
            retriever: Arc::new(load_retriever(config, corpus, index)?),
            tokenizer: config.retrieval.tokenizer.build(),
            config: OrchestratorConfig {
                k: config.retrieval.k,
                trim: config.trim,
                ..OrchestratorConfig::default()
            },
        },
    });
    let addr = format!("{}:{}", server.host, server.port);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::clone(&state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    drop(runtime);
    drop(state);
    Ok(())
}
