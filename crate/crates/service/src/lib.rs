//! HTTP front end over a live patch memory.
//!
//! | route                    | purpose                                   |
//! |--------------------------|-------------------------------------------|
//! | `POST /v1/query`         | answer a question, with full provenance   |
//! | `POST /v1/feedback`      | store a correction (durable before 200)   |
//! | `GET  /v1/memory/stats`  | patch counts per source                   |
//! | `GET  /v1/patches`       | paginated patch listing, no embeddings    |
//! | `GET  /healthz`          | liveness                                  |
//!
//! Feedback writes go through a single journal writer; each patch is appended
//! and synced to the memory file before it is inserted and acknowledged, so
//! an acknowledged patch is visible to every later query and survives a kill.

pub mod config;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{bail, Context};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use patchrag_core::embed::EmbedError;
use patchrag_core::memory::{MemoryError, PatchJournal};
use patchrag_core::pipeline::{answer_query, PipelineError, QueryOptions, QueryOutcome};
use patchrag_core::retrieval::rank_contexts;
use patchrag_core::{Backends, Corpus, FeedbackPatch, Memory, PatchInput, PatchSource, RetrievalConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::ServiceConfig;

const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 1000;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        if e.is_backend_failure() {
            ApiError::Unavailable(e.to_string())
        } else {
            ApiError::Internal(e.to_string())
        }
    }
}

impl From<EmbedError> for ApiError {
    fn from(e: EmbedError) -> Self {
        PipelineError::Embed(e).into()
    }
}

impl From<MemoryError> for ApiError {
    fn from(e: MemoryError) -> Self {
        if e.is_backend_failure() {
            ApiError::Unavailable(e.to_string())
        } else {
            ApiError::Internal(e.to_string())
        }
    }
}

/// Shared state behind every handler.
pub struct AppState {
    pub memory: Memory,
    pub corpus: Corpus,
    pub backends: Backends,
    pub retrieval: RetrievalConfig,
    pub options: QueryOptions,
    pub auth_token: Option<String>,
    journal: Mutex<PatchJournal>,
}

impl AppState {
    /// Opens the journal (cutting any torn tail), replays it into memory and
    /// loads the corpus. Blocking; remote backends may be called to embed
    /// corpus passages that have no stored embedding.
    pub fn open(config: &ServiceConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let embedder = config.embedder_config()?.build()?;
        let generator = config.generator_config()?.build()?;
        let journal = PatchJournal::open(&config.memory_path).with_context(|| format!("opening {}", config.memory_path.display()))?;
        let memory = Memory::load(&config.memory_path).with_context(|| format!("loading {}", config.memory_path.display()))?;
        if let Some(dim) = memory.dim().filter(|d| *d != embedder.dim()) {
            bail!("memory has dimension {dim} but the embedder produces {}", embedder.dim());
        }
        let corpus = match &config.corpus_path {
            Some(path) => Corpus::load(path, Some(embedder.as_ref())).with_context(|| format!("loading {}", path.display()))?,
            None => Corpus::new(),
        };
        if let Some(dim) = corpus.dim().filter(|d| *d != embedder.dim()) {
            bail!("corpus has dimension {dim} but the embedder produces {}", embedder.dim());
        }
        Ok(Self {
            memory,
            corpus,
            backends: Backends { embedder, generator },
            retrieval: config.retrieval()?,
            options: QueryOptions {
                max_prompt_chars: config.max_prompt_chars,
            },
            auth_token: config.auth_token.clone(),
            journal: Mutex::new(journal),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/query", post(query))
        .route("/v1/feedback", post(feedback))
        .route("/v1/memory/stats", get(stats))
        .route("/v1/patches", get(patches))
        .with_state(state)
}

/// Binds, prints `listening on <addr>` to stdout and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let addr = config.bind_addr()?;
    let state = tokio::task::spawn_blocking(move || AppState::open(&config)).await??;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub question: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UsedPatch {
    pub id: String,
    pub score: f64,
    pub intent_sim: f64,
    pub context_sim: f64,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UsedContextRef {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: String,
    pub used_patches: Vec<UsedPatch>,
    pub used_contexts: Vec<UsedContextRef>,
    pub prompt_chars: usize,
    pub latency_ms: u64,
}

impl From<QueryOutcome> for QueryResponse {
    fn from(o: QueryOutcome) -> Self {
        Self {
            prompt_chars: o.prompt.chars().count(),
            answer: o.answer,
            used_patches: o
                .used_patches
                .into_iter()
                .map(|s| UsedPatch {
                    id: s.patch.id.clone(),
                    score: s.score,
                    intent_sim: s.intent_sim,
                    context_sim: s.context_sim,
                    question: s.patch.query_text.clone(),
                    answer: s.patch.answer_text.clone(),
                })
                .collect(),
            used_contexts: o.used_contexts.into_iter().map(|c| UsedContextRef { id: c.id, score: c.score }).collect(),
            latency_ms: o.latency_ms,
        }
    }
}

async fn query(State(state): State<Arc<AppState>>, body: Result<Json<QueryRequest>, JsonRejection>) -> Result<Json<QueryResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let question = req
        .question
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| ApiError::BadRequest("question must be a non-empty string".into()))?;
    blocking(move || {
        let outcome = answer_query(&question, &state.memory, &state.corpus, &state.backends, &state.retrieval, state.options, |_| true)?;
        state.memory.advance_step();
        Ok(Json(outcome.into()))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub question: Option<String>,
    pub answer: Option<String>,
    pub context: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub patch_id: String,
    /// Embed + insert + persist time, in whole milliseconds rounded up.
    pub correction_lag_ms: u64,
    pub correction_lag_us: u64,
    /// `provided`, or `top1_corpus` when the context was filled in.
    pub context_source: String,
    pub context: String,
}

fn check_auth(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.auth_token else {
        return Ok(());
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::Unauthorized)
    }
}

fn non_empty(field: Option<String>, name: &str) -> Result<String, ApiError> {
    field
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| ApiError::Unprocessable(format!("{name} must be a non-empty string")))
}

fn store_feedback(state: &AppState, question: String, answer: String, context: Option<String>) -> Result<FeedbackResponse, ApiError> {
    // The journal lock serialises all feedback writes.
    let mut journal = state.journal.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let embedder = state.backends.embedder.as_ref();
    let (query_embedding, context_text, context_embedding, context_source) = match context {
        Some(c) => {
            let mut v = embedder.embed_batch(&[&question, &c])?;
            let ce = v.pop().ok_or_else(|| ApiError::Unavailable("missing vector".into()))?;
            let qe = v.pop().ok_or_else(|| ApiError::Unavailable("missing vector".into()))?;
            (qe, c, ce, "provided")
        }
        None => {
            let qe = embedder.embed(&question)?;
            let top = rank_contexts(&qe, &state.corpus, 1).map_err(PipelineError::from)?;
            let doc = top
                .first()
                .ok_or_else(|| ApiError::Unprocessable("context is required when the corpus is empty".into()))?
                .doc;
            (qe, doc.text.clone(), doc.embedding.clone(), "top1_corpus")
        }
    };
    let patch: Arc<FeedbackPatch> = state.memory.insert_embedded_with(
        PatchInput {
            query_text: question,
            answer_text: answer,
            context_text: context_text.clone(),
            source: PatchSource::Expert,
        },
        query_embedding,
        context_embedding,
        |p| journal.append(p),
    )?;
    let micros = started.elapsed().as_micros() as u64;
    Ok(FeedbackResponse {
        patch_id: patch.id.clone(),
        correction_lag_ms: micros.div_ceil(1000),
        correction_lag_us: micros,
        context_source: context_source.into(),
        context: context_text,
    })
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<FeedbackResponse>, ApiError> {
    check_auth(&state, &headers)?;
    let Json(req) = body.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    let question = non_empty(req.question, "question")?;
    let answer = non_empty(req.answer, "answer")?;
    let context = req.context.filter(|c| !c.trim().is_empty());
    blocking(move || store_feedback(&state, question, answer, context).map(Json)).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsResponse {
    pub n_patches: usize,
    pub by_source: BTreeMap<String, usize>,
    pub dim: usize,
    /// Step of the earliest expert patch, if any.
    pub injection_step: Option<u64>,
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<StatsResponse> {
    let view = state.memory.view();
    let mut by_source = BTreeMap::new();
    let mut injection_step = view.clock().feedback_injection_step;
    for p in view.patches() {
        *by_source.entry(p.source.to_string()).or_insert(0) += 1;
        if p.source == PatchSource::Expert {
            injection_step = Some(injection_step.map_or(p.inserted_at_step, |s| s.min(p.inserted_at_step)));
        }
    }
    Json(StatsResponse {
        n_patches: view.patches().len(),
        by_source,
        dim: state.backends.embedder.dim(),
        injection_step,
    })
}

#[derive(Debug, Deserialize)]
pub struct PageParams {
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatchSummary {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub context: String,
    pub source: String,
    pub inserted_at_step: u64,
    pub inserted_at_wall: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatchPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub patches: Vec<PatchSummary>,
}

async fn patches(State(state): State<Arc<AppState>>, params: Result<Query<PageParams>, QueryRejection>) -> Result<Json<PatchPage>, ApiError> {
    let Query(params) = params.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let limit = params.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::BadRequest(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let offset = params.offset.unwrap_or(0);
    let view = state.memory.view();
    let all = view.patches();
    let page = all
        .iter()
        .skip(offset)
        .take(limit)
        .map(|p| PatchSummary {
            id: p.id.clone(),
            question: p.query_text.clone(),
            answer: p.answer_text.clone(),
            context: p.context_text.clone(),
            source: p.source.to_string(),
            inserted_at_step: p.inserted_at_step,
            inserted_at_wall: p.inserted_at_wall,
        })
        .collect();
    Ok(Json(PatchPage {
        total: all.len(),
        offset,
        limit,
        patches: page,
    }))
}
