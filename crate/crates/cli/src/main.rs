//! `patchrag`: ingestion, evaluation runs and the HTTP service.
//!
//! Exit codes: 0 success, 2 bad flags or unreadable inputs, 3 backend failure.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use patchrag_core::embed::{EmbedError, EmbedderConfig};
use patchrag_core::fsutil::write_atomic;
use patchrag_core::generate::{GenerateError, GeneratorConfig, GeneratorKind};
use patchrag_core::harness::{
    apply_stress, inject_expert_feedback, load_items, populate_records, load_feedback_records, run_lagged_baseline, run_lambda_sweep,
    run_snapshot, save_items, HarnessError, SnapshotOptions, SnapshotReport, StressSpec,
};
use patchrag_core::memory::MemoryError;
use patchrag_core::pipeline::{answer_query, PipelineError, QueryOptions};
use patchrag_core::{Backends, Corpus, Memory, Metric, PatchSource, RetrievalConfig, RetrievalMode, StressVariant, StubEmbedder};
use patchrag_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "patchrag", version, about = "Feedback-patch RAG: ingest, evaluate, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a passage JSONL file ({id, text}) and write it with embeddings.
    IngestCorpus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Add {question, answer, context} records to a memory file.
    IngestFeedback {
        #[arg(long)]
        input: PathBuf,
        /// Memory file; created if missing, rewritten atomically.
        #[arg(long)]
        memory: PathBuf,
        #[arg(long, default_value = "pre_t_synthetic")]
        source: PatchSource,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Answer one question and print the answer with its provenance as JSON.
    Query {
        #[arg(long)]
        question: String,
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Insert every item's expert feedback into a memory file.
    Inject {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Evaluate, inject feedback, evaluate again; print "pre <x> post <y> gain <+z>".
    Snapshot {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Snapshot run where injected patches stay invisible for the first DELAY post-t queries.
    Lagged {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        delay: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Snapshot run per lambda; CSV with columns lambda,pre,post.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_lambda)]
        lambdas: Vec<f64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a stressed copy of an item file.
    StressGen {
        #[arg(long)]
        items: PathBuf,
        /// clean | top1 | noise:<fraction> | blank | vague | conflict
        #[arg(long)]
        variant: StressVariant,
        /// Required for noise and conflict.
        #[arg(long)]
        seed: Option<u64>,
        /// Required for top1.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Run the HTTP service. Config from --config or PATCHRAG_CONFIG.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides bind_address from the config file.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Summarise a snapshot report JSON file.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// `stub` (deterministic, offline) or `remote` (PATCHRAG_EMBED_* / PATCHRAG_GEN_* env vars).
    #[arg(long, default_value = "stub", value_parser = ["stub", "remote"])]
    backends: String,
    /// Embedding dimension.
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    /// Generator used when --backends stub.
    #[arg(long, default_value = "patch_copy_stub", value_parser = ["patch_copy_stub", "echo_stub"])]
    stub_generator: String,
}

#[derive(Args, Clone)]
struct RetrievalArgs {
    #[arg(long, default_value_t = 0.5, value_parser = parse_lambda)]
    lambda: f64,
    /// Feedback patches per prompt.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Corpus passages per prompt.
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// dual | intent_only | context_only | corpus_q_to_c
    #[arg(long, default_value = "dual")]
    mode: RetrievalMode,
    #[arg(long)]
    max_prompt_chars: Option<usize>,
}

impl RetrievalArgs {
    fn config(&self) -> RetrievalConfig {
        RetrievalConfig {
            lambda: self.lambda,
            k_feedback: self.k,
            n_contexts: self.n,
            mode: self.mode,
        }
    }
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long)]
    items: PathBuf,
    /// Saved memory JSONL to start from.
    #[arg(long)]
    memory: Option<PathBuf>,
    /// {question, answer, context} records loaded as pre-t feedback.
    #[arg(long = "pre-t")]
    pre_t: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "em")]
    metric: Metric,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset label; defaults to the items file stem.
    #[arg(long)]
    dataset: Option<String>,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    backends: BackendArgs,
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err("lambda must be in [0,1]".into())
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Backend(String),
}

impl Failure {
    fn usage(e: impl Display) -> Self {
        Failure::Usage(e.to_string())
    }

    fn classify(backend: bool, e: impl Display) -> Self {
        if backend {
            Failure::Backend(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Self::classify(e.is_backend_failure(), e)
    }
}

impl From<MemoryError> for Failure {
    fn from(e: MemoryError) -> Self {
        Self::classify(e.is_backend_failure(), e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self::classify(e.is_backend_failure(), e)
    }
}

impl From<EmbedError> for Failure {
    fn from(e: EmbedError) -> Self {
        Self::classify(matches!(e, EmbedError::EmbedderUnavailable(_)), e)
    }
}

impl From<GenerateError> for Failure {
    fn from(e: GenerateError) -> Self {
        Self::classify(matches!(e, GenerateError::GeneratorUnavailable(_)), e)
    }
}

type Outcome = Result<(), Failure>;

fn build_backends(args: &BackendArgs) -> Result<Backends, Failure> {
    if args.backends == "remote" {
        return Ok(Backends {
            embedder: EmbedderConfig::remote_from_env(args.dim)?.build()?,
            generator: GeneratorConfig::remote_from_env()?.build()?,
        });
    }
    let kind = match args.stub_generator.as_str() {
        "echo_stub" => GeneratorKind::EchoStub,
        _ => GeneratorKind::PatchCopyStub,
    };
    Ok(Backends {
        embedder: Arc::new(StubEmbedder::new(args.dim)?),
        generator: GeneratorConfig::stub(kind).build()?,
    })
}

fn load_memory(path: &Path, dim: usize) -> Result<Memory, Failure> {
    let memory = Memory::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(d) = memory.dim().filter(|d| *d != dim) {
        return Err(Failure::usage(format!("{} holds {d}-dimensional patches but --dim is {dim}", path.display())));
    }
    Ok(memory)
}

fn load_corpus(path: Option<&Path>, backends: &Backends) -> Result<Corpus, Failure> {
    let Some(path) = path else {
        return Ok(Corpus::new());
    };
    let corpus = Corpus::load(path, Some(backends.embedder.as_ref())).map_err(|e| {
        let backend = e.is_backend_failure();
        Failure::classify(backend, format!("{}: {e}", path.display()))
    })?;
    if let Some(d) = corpus.dim().filter(|d| *d != backends.embedder.dim()) {
        return Err(Failure::usage(format!("{} holds {d}-dimensional passages", path.display())));
    }
    Ok(corpus)
}

struct EvalSetup {
    items: Vec<patchrag_core::EvalItem>,
    memory: Memory,
    corpus: Corpus,
    backends: Backends,
    options: SnapshotOptions,
}

fn eval_setup(args: &EvalArgs) -> Result<EvalSetup, Failure> {
    args.retrieval.config().validate().map_err(Failure::usage)?;
    let backends = build_backends(&args.backends)?;
    let items = load_items(&args.items).map_err(|e| Failure::usage(format!("{}: {e}", args.items.display())))?;
    let memory = match &args.memory {
        Some(path) => load_memory(path, args.backends.dim)?,
        None => Memory::new(),
    };
    if let Some(path) = &args.pre_t {
        let records = load_feedback_records(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        populate_records(&memory, &records, PatchSource::PreTSynthetic, backends.embedder.as_ref())?;
    }
    let corpus = load_corpus(args.corpus.as_deref(), &backends)?;
    let dataset = args
        .dataset
        .clone()
        .or_else(|| args.items.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    Ok(EvalSetup {
        items,
        memory,
        corpus,
        backends,
        options: SnapshotOptions {
            dataset,
            seed: args.seed,
            query: QueryOptions {
                max_prompt_chars: args.retrieval.max_prompt_chars,
            },
        },
    })
}

fn write_out(path: &Path, bytes: &[u8]) -> Outcome {
    write_atomic(path, bytes).map_err(|e| Failure::usage(format!("writing {}: {e}", path.display())))
}

fn finish_report(report: &SnapshotReport, out: Option<&Path>) -> Outcome {
    if let Some(path) = out {
        write_out(path, (report.to_json() + "\n").as_bytes())?;
    }
    println!("{}", report.table_line());
    eprintln!(
        "correction lag {} ms for {} patches ({:.3} ms per patch)",
        report.correction_lag_ms.per_batch_total, report.n_items, report.correction_lag_ms.per_patch_mean
    );
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::IngestCorpus { input, out, backends } => {
            let b = build_backends(&backends)?;
            let corpus = load_corpus(Some(&input), &b)?;
            write_out(&out, corpus.to_jsonl().as_bytes())?;
            eprintln!("{} passages written to {}", corpus.len(), out.display());
        }
        Command::IngestFeedback {
            input,
            memory,
            source,
            backends,
        } => {
            let b = build_backends(&backends)?;
            let mem = if memory.exists() {
                load_memory(&memory, backends.dim)?
            } else {
                Memory::new()
            };
            let records = load_feedback_records(&input).map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
            let n = populate_records(&mem, &records, source, b.embedder.as_ref())?;
            write_out(&memory, mem.to_jsonl().as_bytes())?;
            eprintln!("{n} records ingested; {} patches in {}", mem.len(), memory.display());
        }
        Command::Query {
            question,
            memory,
            corpus,
            retrieval,
            backends,
        } => {
            let b = build_backends(&backends)?;
            let mem = match &memory {
                Some(path) => load_memory(path, backends.dim)?,
                None => Memory::new(),
            };
            let corpus = load_corpus(corpus.as_deref(), &b)?;
            let options = QueryOptions {
                max_prompt_chars: retrieval.max_prompt_chars,
            };
            let out = answer_query(&question, &mem, &corpus, &b, &retrieval.config(), options, |_| true)?;
            let json = serde_json::json!({
                "answer": out.answer,
                "used_patches": out.used_patches.iter().map(|s| serde_json::json!({
                    "id": s.patch.id,
                    "score": s.score,
                    "intent_sim": s.intent_sim,
                    "context_sim": s.context_sim,
                    "question": s.patch.query_text,
                    "answer": s.patch.answer_text,
                })).collect::<Vec<_>>(),
                "used_contexts": out.used_contexts.iter().map(|c| serde_json::json!({"id": c.id, "score": c.score})).collect::<Vec<_>>(),
                "prompt": out.prompt,
                "latency_ms": out.latency_ms,
            });
            println!("{}", serde_json::to_string_pretty(&json).map_err(Failure::usage)?);
        }
        Command::Inject { items, memory, backends } => {
            let b = build_backends(&backends)?;
            let mem = if memory.exists() {
                load_memory(&memory, backends.dim)?
            } else {
                Memory::new()
            };
            let items = load_items(&items).map_err(|e| Failure::usage(format!("{}: {e}", items.display())))?;
            let injection = inject_expert_feedback(&mem, &items, b.embedder.as_ref())?;
            write_out(&memory, mem.to_jsonl().as_bytes())?;
            println!(
                "injected {} patches in {} ms ({:.3} ms per patch)",
                injection.patch_ids.len(),
                injection.lag.per_batch_total,
                injection.lag.per_patch_mean
            );
        }
        Command::Snapshot { eval, out } => {
            let s = eval_setup(&eval)?;
            let report = run_snapshot(&s.items, &s.memory, &s.corpus, &s.backends, &eval.retrieval.config(), eval.metric, &s.options)?;
            finish_report(&report, out.as_deref())?;
        }
        Command::Lagged { eval, delay, out } => {
            let s = eval_setup(&eval)?;
            let report = run_lagged_baseline(&s.items, &s.memory, &s.corpus, &s.backends, &eval.retrieval.config(), eval.metric, &s.options, delay)?;
            finish_report(&report, out.as_deref())?;
        }
        Command::Sweep { eval, lambdas, out } => {
            let s = eval_setup(&eval)?;
            let points = run_lambda_sweep(&s.items, &s.memory, &s.corpus, &s.backends, &eval.retrieval.config(), &lambdas, eval.metric, &s.options)?;
            let mut csv = String::from("lambda,pre,post\n");
            for p in points {
                csv.push_str(&format!("{},{:.1},{:.1}\n", p.lambda, p.pre_t, p.post_t));
            }
            match out {
                Some(path) => write_out(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::StressGen {
            items,
            variant,
            seed,
            corpus,
            out,
            backends,
        } => {
            let b = build_backends(&backends)?;
            let loaded = load_items(&items).map_err(|e| Failure::usage(format!("{}: {e}", items.display())))?;
            let corpus = load_corpus(corpus.as_deref(), &b)?;
            let stressed = apply_stress(&loaded, &StressSpec { variant, seed }, &corpus, b.embedder.as_ref())?;
            save_items(&out, &stressed)?;
            eprintln!("{} items written to {}", stressed.len(), out.display());
        }
        Command::Serve { config, bind } => {
            let mut cfg = match config {
                Some(path) => ServiceConfig::load(&path),
                None => ServiceConfig::from_env(),
            }
            .map_err(|e| Failure::usage(format!("{e:#}")))?;
            if let Some(bind) = bind {
                cfg.bind_address = bind;
                cfg.validate().map_err(|e| Failure::usage(format!("{e:#}")))?;
            }
            let runtime = tokio::runtime::Runtime::new().map_err(Failure::usage)?;
            runtime
                .block_on(patchrag_service::serve(cfg))
                .map_err(|e| Failure::usage(format!("{e:#}")))?;
        }
        Command::Report { input } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
            let report: SnapshotReport = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
            let fixed = report.per_item.iter().filter(|o| o.pre_t.em == 0 && o.post_t.em == 1).count();
            let broken = report.per_item.iter().filter(|o| o.pre_t.em == 1 && o.post_t.em == 0).count();
            println!("dataset {} metric {} n_items {}", report.dataset, report.metric, report.n_items);
            println!("{}", report.table_line());
            println!(
                "correction_lag_ms {} per_patch {:.3}",
                report.correction_lag_ms.per_batch_total, report.correction_lag_ms.per_patch_mean
            );
            println!("fixed {fixed} broken {broken}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Backend(msg)) => {
            eprintln!("backend failure: {msg}");
            ExitCode::from(3)
        }
    }
}
