//! Feedback-patch memory, retrieval corpus and the logical step clock.
//!
//! Patches live in process memory behind a read/write lock: any number of
//! queries scan a consistent view while a single writer appends. Every
//! insert takes the write lock exactly once, so a reader sees a patch either
//! fully or not at all.
//!
//! Persistence is JSON Lines, one record per line. Embedding components are
//! written with nine significant digits.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::embed::{EmbedError, Embedder, EmbeddingVector};
use crate::fsutil;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("patch id {0:?} already exists")]
    DuplicateId(String),
    #[error("feedback injection already marked at step {0}")]
    InjectionAlreadyMarked(u64),
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

impl From<std::io::Error> for MemoryError {
    fn from(e: std::io::Error) -> Self {
        MemoryError::IoFailure(e.to_string())
    }
}

impl MemoryError {
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, MemoryError::Embed(EmbedError::EmbedderUnavailable(_)))
    }
}

/// Where a patch came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchSource {
    PreTSynthetic,
    Expert,
    StressVariant(String),
}

impl std::fmt::Display for PatchSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PatchSource::PreTSynthetic => f.write_str("pre_t_synthetic"),
            PatchSource::Expert => f.write_str("expert"),
            PatchSource::StressVariant(name) => write!(f, "stress_variant:{name}"),
        }
    }
}

impl std::str::FromStr for PatchSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre_t_synthetic" => Ok(PatchSource::PreTSynthetic),
            "expert" => Ok(PatchSource::Expert),
            other => other
                .strip_prefix("stress_variant:")
                .map(|n| PatchSource::StressVariant(n.to_string()))
                .ok_or_else(|| format!("unknown patch source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchInput {
    pub query_text: String,
    pub answer_text: String,
    pub context_text: String,
    pub source: PatchSource,
}

/// One stored correction: question, corrected answer, supporting evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPatch {
    pub id: String,
    pub query_text: String,
    pub answer_text: String,
    pub context_text: String,
    pub query_embedding: EmbeddingVector,
    pub context_embedding: EmbeddingVector,
    pub inserted_at_step: u64,
    /// Milliseconds since the Unix epoch.
    pub inserted_at_wall: u64,
    pub source: PatchSource,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepClock {
    pub current_step: u64,
    pub feedback_injection_step: Option<u64>,
}

impl StepClock {
    pub fn advance(&mut self) -> u64 {
        self.current_step += 1;
        self.current_step
    }

    pub fn mark_injection(&mut self) -> Result<(), MemoryError> {
        if let Some(step) = self.feedback_injection_step {
            return Err(MemoryError::InjectionAlreadyMarked(step));
        }
        self.feedback_injection_step = Some(self.current_step);
        Ok(())
    }
}

pub fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Default)]
struct MemoryState {
    patches: Vec<Arc<FeedbackPatch>>,
    ids: HashSet<String>,
    dim: Option<usize>,
    clock: StepClock,
    next_seq: u64,
}

impl MemoryState {
    fn next_id(&mut self) -> String {
        loop {
            let id = format!("patch-{:07}", self.next_seq);
            self.next_seq += 1;
            if !self.ids.contains(&id) {
                return id;
            }
        }
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<(), MemoryError> {
        match self.dim {
            Some(d) if d != v.dim() => Err(EmbedError::DimensionMismatch {
                expected: d,
                actual: v.dim(),
            }
            .into()),
            _ => Ok(()),
        }
    }

    fn push(&mut self, patch: FeedbackPatch) -> Result<Arc<FeedbackPatch>, MemoryError> {
        if self.ids.contains(&patch.id) {
            return Err(MemoryError::DuplicateId(patch.id));
        }
        self.check_dim(&patch.query_embedding)?;
        self.check_dim(&patch.context_embedding)?;
        if patch.query_embedding.dim() != patch.context_embedding.dim() {
            return Err(EmbedError::DimensionMismatch {
                expected: patch.query_embedding.dim(),
                actual: patch.context_embedding.dim(),
            }
            .into());
        }
        self.dim = Some(patch.query_embedding.dim());
        self.ids.insert(patch.id.clone());
        let patch = Arc::new(patch);
        self.patches.push(Arc::clone(&patch));
        Ok(patch)
    }
}

/// The feedback-patch store.
#[derive(Debug, Default)]
pub struct Memory {
    state: RwLock<MemoryState>,
}

/// Consistent read view over the memory; holds the read lock while alive.
pub struct MemoryView<'a> {
    guard: RwLockReadGuard<'a, MemoryState>,
}

impl MemoryView<'_> {
    pub fn patches(&self) -> &[Arc<FeedbackPatch>] {
        &self.guard.patches
    }

    pub fn clock(&self) -> StepClock {
        self.guard.clock
    }

    pub fn dim(&self) -> Option<usize> {
        self.guard.dim
    }
}

impl Clone for Memory {
    fn clone(&self) -> Self {
        Self {
            state: RwLock::new(self.read_state().clone()),
        }
    }
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Memory whose patches must all have dimension `dim`.
    pub fn with_dim(dim: usize) -> Self {
        let memory = Self::default();
        memory.write_state().dim = Some(dim);
        memory
    }

    fn read_state(&self) -> RwLockReadGuard<'_, MemoryState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write_state(&self) -> std::sync::RwLockWriteGuard<'_, MemoryState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn view(&self) -> MemoryView<'_> {
        MemoryView {
            guard: self.read_state(),
        }
    }

    pub fn len(&self) -> usize {
        self.read_state().patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        self.read_state().dim
    }

    pub fn clock(&self) -> StepClock {
        self.read_state().clock
    }

    pub fn get(&self, id: &str) -> Option<Arc<FeedbackPatch>> {
        self.read_state().patches.iter().find(|p| p.id == id).cloned()
    }

    pub fn patches(&self) -> Vec<Arc<FeedbackPatch>> {
        self.read_state().patches.clone()
    }

    pub fn count_by_source(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.read_state().patches.iter() {
            *out.entry(p.source.to_string()).or_insert(0) += 1;
        }
        out
    }

    pub fn advance_step(&self) -> u64 {
        self.write_state().clock.advance()
    }

    pub fn mark_injection(&self) -> Result<(), MemoryError> {
        self.write_state().clock.mark_injection()
    }

    /// Embeds the question and the context with `embedder`, then inserts.
    pub fn insert_patch(&self, input: PatchInput, embedder: &dyn Embedder) -> Result<Arc<FeedbackPatch>, MemoryError> {
        let mut vectors = embedder.embed_batch(&[&input.query_text, &input.context_text])?;
        let context = vectors.pop().ok_or_else(|| EmbedError::EmbedderUnavailable("missing vector".into()))?;
        let query = vectors.pop().ok_or_else(|| EmbedError::EmbedderUnavailable("missing vector".into()))?;
        if query.dim() != embedder.dim() {
            return Err(EmbedError::DimensionMismatch {
                expected: embedder.dim(),
                actual: query.dim(),
            }
            .into());
        }
        self.insert_embedded(input, query, context)
    }

    pub fn insert_embedded(
        &self,
        input: PatchInput,
        query_embedding: EmbeddingVector,
        context_embedding: EmbeddingVector,
    ) -> Result<Arc<FeedbackPatch>, MemoryError> {
        self.insert_embedded_with(input, query_embedding, context_embedding, |_| Ok(()))
    }

    /// Inserts under the write lock after `before_commit` accepts the fully
    /// formed patch. If the hook fails nothing is inserted. The service uses
    /// the hook to make the patch durable before it becomes visible.
    pub fn insert_embedded_with<F>(
        &self,
        input: PatchInput,
        query_embedding: EmbeddingVector,
        context_embedding: EmbeddingVector,
        before_commit: F,
    ) -> Result<Arc<FeedbackPatch>, MemoryError>
    where
        F: FnOnce(&FeedbackPatch) -> Result<(), MemoryError>,
    {
        let mut state = self.write_state();
        state.check_dim(&query_embedding)?;
        state.check_dim(&context_embedding)?;
        let patch = FeedbackPatch {
            id: state.next_id(),
            query_text: input.query_text,
            answer_text: input.answer_text,
            context_text: input.context_text,
            query_embedding,
            context_embedding,
            inserted_at_step: state.clock.current_step,
            inserted_at_wall: wall_ms(),
            source: input.source,
        };
        before_commit(&patch)?;
        state.push(patch)
    }

    /// Adds a patch exactly as given (id, step and timestamp included).
    pub fn restore_patch(&self, patch: FeedbackPatch) -> Result<Arc<FeedbackPatch>, MemoryError> {
        let mut state = self.write_state();
        if let Some(last) = state.patches.last() {
            if patch.inserted_at_step < last.inserted_at_step {
                return Err(MemoryError::MalformedRecord {
                    line: state.patches.len() + 1,
                    reason: "inserted_at_step decreases".into(),
                });
            }
        }
        state.clock.current_step = state.clock.current_step.max(patch.inserted_at_step);
        let patch = state.push(patch)?;
        state.next_seq = state.next_seq.max(state.patches.len() as u64);
        Ok(patch)
    }

    pub fn to_jsonl(&self) -> String {
        let state = self.read_state();
        let mut out = String::new();
        for p in &state.patches {
            out.push_str(&patch_to_line(p));
            out.push('\n');
        }
        out
    }

    /// Writes every patch, in insertion order, replacing `path` atomically.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        fsutil::write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let file = File::open(path)?;
        Self::from_reader(BufReader::new(file))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, MemoryError> {
        let memory = Memory::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let patch = patch_from_line(&line).map_err(|reason| MemoryError::MalformedRecord { line: idx + 1, reason })?;
            memory.restore_patch(patch).map_err(|e| match e {
                MemoryError::MalformedRecord { reason, .. } => MemoryError::MalformedRecord { line: idx + 1, reason },
                other => MemoryError::MalformedRecord {
                    line: idx + 1,
                    reason: other.to_string(),
                },
            })?;
        }
        Ok(memory)
    }
}

/// JSON array of numbers, each with nine significant digits.
pub fn format_embedding(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.8e}")).collect();
    format!("[{}]", parts.join(","))
}

#[derive(Serialize)]
struct PatchRecordOut<'a> {
    id: &'a str,
    query: &'a str,
    answer: &'a str,
    context: &'a str,
    q_emb: Box<RawValue>,
    c_emb: Box<RawValue>,
    step: u64,
    wall_ms: u64,
    source: String,
}

#[derive(Deserialize)]
struct PatchRecordIn {
    id: String,
    query: String,
    answer: String,
    context: String,
    q_emb: Vec<f64>,
    c_emb: Vec<f64>,
    step: u64,
    wall_ms: u64,
    source: String,
}

fn raw(s: String) -> Box<RawValue> {
    RawValue::from_string(s).expect("formatted embedding is valid JSON")
}

pub fn patch_to_line(p: &FeedbackPatch) -> String {
    let rec = PatchRecordOut {
        id: &p.id,
        query: &p.query_text,
        answer: &p.answer_text,
        context: &p.context_text,
        q_emb: raw(format_embedding(p.query_embedding.values())),
        c_emb: raw(format_embedding(p.context_embedding.values())),
        step: p.inserted_at_step,
        wall_ms: p.inserted_at_wall,
        source: p.source.to_string(),
    };
    serde_json::to_string(&rec).expect("patch record serializes")
}

pub fn patch_from_line(line: &str) -> Result<FeedbackPatch, String> {
    let rec: PatchRecordIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Ok(FeedbackPatch {
        id: rec.id,
        query_text: rec.query,
        answer_text: rec.answer,
        context_text: rec.context,
        query_embedding: EmbeddingVector::from_unit(rec.q_emb).map_err(|e| format!("q_emb: {e}"))?,
        context_embedding: EmbeddingVector::from_unit(rec.c_emb).map_err(|e| format!("c_emb: {e}"))?,
        inserted_at_step: rec.step,
        inserted_at_wall: rec.wall_ms,
        source: rec.source.parse()?,
    })
}

/// Append-only patch log. Each append is flushed and synced before it
/// returns, so an acknowledged patch survives a process kill.
#[derive(Debug)]
pub struct PatchJournal {
    file: File,
}

impl PatchJournal {
    /// Opens `path` for appending, creating it if needed. A torn final line
    /// (no trailing newline, left by a crash mid-write) is cut off first.
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut content = Vec::new();
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut content)?;
        if !content.is_empty() && content.last() != Some(&b'\n') {
            let keep = content.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64)?;
            file.sync_all()?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, patch: &FeedbackPatch) -> Result<(), MemoryError> {
        let mut line = patch_to_line(patch);
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// A retrieval-corpus passage.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDocument {
    pub id: String,
    pub text: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    docs: Vec<CorpusDocument>,
    ids: HashSet<String>,
}

#[derive(Serialize)]
struct CorpusRecordOut<'a> {
    id: &'a str,
    text: &'a str,
    emb: Box<RawValue>,
}

#[derive(Deserialize)]
struct CorpusRecordIn {
    id: String,
    text: String,
    #[serde(default)]
    emb: Option<Vec<f64>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn docs(&self) -> &[CorpusDocument] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.docs.first().map(|d| d.embedding.dim())
    }

    pub fn push(&mut self, doc: CorpusDocument) -> Result<(), MemoryError> {
        if self.ids.contains(&doc.id) {
            return Err(MemoryError::DuplicateId(doc.id));
        }
        if let Some(d) = self.dim() {
            if d != doc.embedding.dim() {
                return Err(EmbedError::DimensionMismatch {
                    expected: d,
                    actual: doc.embedding.dim(),
                }
                .into());
            }
        }
        self.ids.insert(doc.id.clone());
        self.docs.push(doc);
        Ok(())
    }

    /// Embeds `(id, text)` pairs in one batch.
    pub fn from_texts(texts: &[(String, String)], embedder: &dyn Embedder) -> Result<Self, MemoryError> {
        let refs: Vec<&str> = texts.iter().map(|(_, t)| t.as_str()).collect();
        let vectors = embedder.embed_batch(&refs)?;
        let mut corpus = Corpus::new();
        for ((id, text), embedding) in texts.iter().zip(vectors) {
            corpus.push(CorpusDocument {
                id: id.clone(),
                text: text.clone(),
                embedding,
            })?;
        }
        Ok(corpus)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let rec = CorpusRecordOut {
                id: &d.id,
                text: &d.text,
                emb: raw(format_embedding(d.embedding.values())),
            };
            out.push_str(&serde_json::to_string(&rec).expect("corpus record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        fsutil::write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Loads corpus JSONL. Records without `emb` are embedded with
    /// `embedder`; if none is given such records are malformed.
    pub fn load(path: &Path, embedder: Option<&dyn Embedder>) -> Result<Self, MemoryError> {
        let reader = BufReader::new(File::open(path)?);
        let mut pending: Vec<(usize, String, String)> = Vec::new();
        let mut records: Vec<(usize, String, String, Option<EmbeddingVector>)> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| MemoryError::MalformedRecord { line: idx + 1, reason };
            let rec: CorpusRecordIn = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            match rec.emb {
                Some(v) => {
                    let emb = EmbeddingVector::from_unit(v).map_err(|e| malformed(e.to_string()))?;
                    records.push((idx + 1, rec.id, rec.text, Some(emb)));
                }
                None => {
                    if embedder.is_none() {
                        return Err(malformed("missing emb and no embedder configured".into()));
                    }
                    pending.push((records.len(), rec.id.clone(), rec.text.clone()));
                    records.push((idx + 1, rec.id, rec.text, None));
                }
            }
        }
        if let (Some(embedder), false) = (embedder, pending.is_empty()) {
            let texts: Vec<&str> = pending.iter().map(|(_, _, t)| t.as_str()).collect();
            let vectors = embedder.embed_batch(&texts)?;
            for ((slot, _, _), v) in pending.iter().zip(vectors) {
                records[*slot].3 = Some(v);
            }
        }
        let mut corpus = Corpus::new();
        for (line, id, text, emb) in records {
            let embedding = emb.expect("every record embedded");
            corpus
                .push(CorpusDocument { id, text, embedding })
                .map_err(|e| MemoryError::MalformedRecord {
                    line,
                    reason: e.to_string(),
                })?;
        }
        Ok(corpus)
    }
}
