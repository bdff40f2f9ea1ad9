//! Shared intent/context vector space.
//!
//! Every query, feedback question and evidence passage is mapped into one
//! space by a single [`Embedder`]. Two backends exist: an HTTP client for
//! OpenAI-compatible `/embeddings` endpoints and a deterministic
//! bag-of-tokens stub that needs no model at all.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

/// Seed of the stub's token hash. Changing it changes every golden fixture.
pub const STUB_HASH_SEED: u64 = 0x5AFE_C0DE;

/// Maximum number of texts sent in one remote embeddings request.
pub const MAX_BATCH: usize = 128;

/// Tolerance on the unit-norm invariant.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector is not unit-normalized (norm {0})")]
    NotNormalized(f64),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

/// Unit-length vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `raw`. An all-zero (or empty-norm) input maps to the
    /// basis vector `e_0`.
    pub fn normalized(mut raw: Vec<f64>) -> Result<Self, EmbedError> {
        if raw.is_empty() {
            return Err(EmbedError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        let norm = l2_norm(&raw);
        if norm == 0.0 || !norm.is_finite() {
            raw.iter_mut().for_each(|v| *v = 0.0);
            raw[0] = 1.0;
        } else {
            raw.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self(raw))
    }

    /// Wraps values that are already unit length, e.g. when loading from disk.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::NotNormalized(norm));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, clamped to `[-1, 1]`. Negative zero is returned as
/// positive zero so rankings never split on the sign of zero.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a.values(), b.values()) / denom).clamp(-1.0, 1.0) + 0.0)
}

/// A backend that maps text into the shared vector space.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Short identifier recorded in reports.
    fn backend_id(&self) -> String;

    /// Embeds every text, preserving order. Fails as a whole if any text
    /// cannot be embedded.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbedError::EmbedderUnavailable("backend returned no vectors".into()))
    }
}

pub type EmbedderRef = Arc<dyn Embedder>;

fn check_text(text: &str) -> Result<(), EmbedError> {
    if text.trim().is_empty() {
        Err(EmbedError::EmptyText)
    } else {
        Ok(())
    }
}

/// Deterministic bag-of-tokens embedder.
///
/// Each whitespace-delimited token is lowercased, hashed with XXH64 under
/// [`STUB_HASH_SEED`], and counted into bucket `hash % dim`. The count
/// vector is then L2-normalized. Identical texts give identical vectors in
/// every process, and token order does not matter.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::InvalidConfig("stub dim must be positive".into()));
        }
        Ok(Self { dim })
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        check_text(text)?;
        let mut counts = vec![0.0f64; self.dim];
        for token in text.split_whitespace() {
            let token = token.to_lowercase();
            let bucket = (xxh64(token.as_bytes(), STUB_HASH_SEED) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        }
        EmbeddingVector::normalized(counts)
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> String {
        format!("stub-xxh64-d{}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Remote,
    DeterministicStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub dim: usize,
    pub timeout_ms: u64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: usize,
}

impl EmbedderConfig {
    pub fn stub(dim: usize) -> Self {
        Self {
            kind: EmbedderKind::DeterministicStub,
            endpoint_url: None,
            model_name: None,
            dim,
            timeout_ms: 30_000,
            api_key_env: "PATCHRAG_EMBED_KEY".into(),
            max_in_flight: 4,
        }
    }

    /// Remote config from `PATCHRAG_EMBED_URL` / `PATCHRAG_EMBED_MODEL`.
    /// The key itself is read from the variable named by `api_key_env`
    /// (default `PATCHRAG_EMBED_KEY`) when the client is built.
    pub fn remote_from_env(dim: usize) -> Result<Self, EmbedError> {
        let url = std::env::var("PATCHRAG_EMBED_URL")
            .map_err(|_| EmbedError::InvalidConfig("PATCHRAG_EMBED_URL is not set".into()))?;
        Ok(Self {
            kind: EmbedderKind::Remote,
            endpoint_url: Some(url),
            model_name: std::env::var("PATCHRAG_EMBED_MODEL").ok(),
            ..Self::stub(dim)
        })
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::InvalidConfig("dim must be positive".into()));
        }
        if self.timeout_ms == 0 {
            return Err(EmbedError::InvalidConfig("timeout_ms must be positive".into()));
        }
        if self.kind == EmbedderKind::Remote && self.endpoint_url.is_none() {
            return Err(EmbedError::InvalidConfig(
                "remote embedder requires endpoint_url".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<EmbedderRef, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::DeterministicStub => Arc::new(StubEmbedder::new(self.dim)?),
            EmbedderKind::Remote => Arc::new(RemoteEmbedder::new(self)?),
        })
    }
}

/// Counting semaphore bounding concurrent remote requests.
#[derive(Debug)]
pub(crate) struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    cv: Condvar,
}

pub(crate) struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub(crate) fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.cv.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.cv.notify_one();
    }
}

pub(crate) fn http_agent(timeout_ms: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .build()
        .into()
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// Client for an OpenAI-compatible embeddings endpoint.
///
/// `endpoint_url` is the full URL that accepts `POST {"model", "input"}`,
/// e.g. `http://localhost:8080/v1/embeddings`.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    dim: usize,
    in_flight: InFlight,
}

impl RemoteEmbedder {
    pub fn new(config: &EmbedderConfig) -> Result<Self, EmbedError> {
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| EmbedError::InvalidConfig("remote embedder requires endpoint_url".into()))?;
        Ok(Self {
            agent: http_agent(config.timeout_ms),
            url,
            model: config.model_name.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            dim: config.dim,
            in_flight: InFlight::new(config.max_in_flight),
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let _slot = self.in_flight.acquire();
        let body = EmbeddingsRequest {
            model: self.model.as_deref(),
            input: texts,
        };
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| EmbedError::EmbedderUnavailable(e.to_string()))?;
        let parsed: EmbeddingsResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::EmbedderUnavailable(format!("bad response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::EmbedderUnavailable(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for (pos, datum) in parsed.data.into_iter().enumerate() {
            let idx = datum.index.unwrap_or(pos);
            if idx >= texts.len() {
                return Err(EmbedError::EmbedderUnavailable(format!(
                    "embedding index {idx} out of range"
                )));
            }
            if datum.embedding.len() != self.dim {
                return Err(EmbedError::DimensionMismatch {
                    expected: self.dim,
                    actual: datum.embedding.len(),
                });
            }
            slots[idx] = Some(EmbeddingVector::normalized(datum.embedding)?);
        }
        slots
            .into_iter()
            .map(|s| s.ok_or_else(|| EmbedError::EmbedderUnavailable("missing embedding index".into())))
            .collect()
    }

    /// One request for the chunk; on failure, retry each text on its own.
    fn embed_chunk(&self, chunk: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        match self.request(chunk) {
            Ok(v) => Ok(v),
            Err(err @ EmbedError::DimensionMismatch { .. }) => Err(err),
            Err(_) if chunk.len() > 1 => chunk
                .iter()
                .map(|t| self.request(std::slice::from_ref(t)).and_then(|mut v| {
                    v.pop().ok_or_else(|| EmbedError::EmbedderUnavailable("empty response".into()))
                }))
                .collect(),
            Err(err) => Err(err),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> String {
        format!("remote:{}", self.model.as_deref().unwrap_or("default"))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        for t in texts {
            check_text(t)?;
        }
        let chunks: Vec<&[&str]> = texts.chunks(MAX_BATCH).collect();
        if chunks.len() <= 1 {
            return chunks.first().map_or(Ok(Vec::new()), |c| self.embed_chunk(c));
        }
        let mut results: Vec<Result<Vec<EmbeddingVector>, EmbedError>> = Vec::new();
        for wave in chunks.chunks(self.in_flight.limit) {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|chunk| s.spawn(move || self.embed_chunk(chunk)))
                    .collect();
                results.extend(handles.into_iter().map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(EmbedError::EmbedderUnavailable("embedding worker panicked".into()))
                    })
                }));
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
