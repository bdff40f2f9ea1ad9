//! Snapshot evaluation around a single feedback injection.
//!
//! A run evaluates every item (`pre_t`), injects the expert feedback at the
//! current step `t`, then evaluates the same items again (`post_t`). Items
//! are processed in `item_id` order and every query advances the step clock.
//! Correction lag is the wall time of embedding and inserting the injected
//! patches; there is no queueing or redeploy component.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::fsutil;
use crate::memory::{Corpus, Memory, MemoryError, PatchInput, PatchSource};
use crate::metrics::{aggregate, Metric, MetricRecord, MetricsError, Phase};
use crate::pipeline::{answer_query, Backends, PipelineError, QueryOptions};
use crate::retrieval::{rank_contexts, RetrievalConfig, RetrievalError};
use crate::rng::SplitMix64;

/// Answer template for the `vague` variant.
pub const VAGUE_TEMPLATE: &str = "Considering the relevant background, one finds that the matter in question relates to {answer} among other aspects discussed in the sources.";

/// Records embedded per batch while populating memory.
const POPULATE_BATCH: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("phase universes differ between pre_t and post_t")]
    PhaseUniverseMismatch,
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("invalid item on line {line}: {reason}")]
    InvalidItem { line: usize, reason: String },
    #[error("stress variant requires a non-empty corpus")]
    EmptyCorpus,
    #[error("stress variant {0} requires a seed")]
    SeedMissing(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl From<EmbedError> for HarnessError {
    fn from(e: EmbedError) -> Self {
        HarnessError::Memory(MemoryError::Embed(e))
    }
}

impl From<RetrievalError> for HarnessError {
    fn from(e: RetrievalError) -> Self {
        HarnessError::Pipeline(PipelineError::Retrieval(e))
    }
}

impl HarnessError {
    /// True when the failure came from an embedding or generation backend.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            HarnessError::Memory(m) => m.is_backend_failure(),
            HarnessError::Pipeline(p) => p.is_backend_failure(),
            HarnessError::EmptyCorpus => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertFeedback {
    pub paraphrased_query: String,
    pub answer: String,
    pub context: String,
}

/// An evaluation query with its gold answers and paired expert feedback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub item_id: String,
    pub query_text: String,
    pub golds: Vec<String>,
    pub expert_feedback: ExpertFeedback,
    /// Stress variant that produced this feedback, if any.
    pub variant: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct EvalItemRecord {
    id: String,
    query: String,
    golds: Vec<String>,
    fb_query: String,
    fb_answer: String,
    fb_context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.item_id.is_empty() {
            return Err("empty id".into());
        }
        if self.query_text.trim().is_empty() {
            return Err("empty query".into());
        }
        if self.golds.is_empty() {
            return Err("golds must be non-empty".into());
        }
        if self.expert_feedback.paraphrased_query == self.query_text {
            return Err("fb_query must differ from query".into());
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&EvalItemRecord {
            id: self.item_id.clone(),
            query: self.query_text.clone(),
            golds: self.golds.clone(),
            fb_query: self.expert_feedback.paraphrased_query.clone(),
            fb_answer: self.expert_feedback.answer.clone(),
            fb_context: self.expert_feedback.context.clone(),
            variant: self.variant.clone(),
        })
        .expect("item serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let r: EvalItemRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let item = EvalItem {
            item_id: r.id,
            query_text: r.query,
            golds: r.golds,
            expert_feedback: ExpertFeedback {
                paraphrased_query: r.fb_query,
                answer: r.fb_answer,
                context: r.fb_context,
            },
            variant: r.variant,
        };
        item.validate()?;
        Ok(item)
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, MemoryError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

pub fn load_items(path: &Path) -> Result<Vec<EvalItem>, HarnessError> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| EvalItem::from_line(&text).map_err(|reason| HarnessError::InvalidItem { line, reason }))
        .collect()
}

pub fn items_to_jsonl(items: &[EvalItem]) -> String {
    items.iter().map(|i| i.to_line() + "\n").collect()
}

pub fn save_items(path: &Path, items: &[EvalItem]) -> Result<(), HarnessError> {
    fsutil::write_atomic(path, items_to_jsonl(items).as_bytes()).map_err(MemoryError::from)?;
    Ok(())
}

/// A raw feedback record: question, answer, supporting context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub question: String,
    pub answer: String,
    pub context: String,
}

pub fn load_feedback_records(path: &Path) -> Result<Vec<FeedbackRecord>, HarnessError> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| HarnessError::Memory(MemoryError::MalformedRecord { line, reason: e.to_string() }))
        })
        .collect()
}

/// Embeds and inserts `records` with the given source, batching the
/// embedding calls. Returns the number inserted.
pub fn populate_records(memory: &Memory, records: &[FeedbackRecord], source: PatchSource, embedder: &dyn Embedder) -> Result<usize, HarnessError> {
    for batch in records.chunks(POPULATE_BATCH) {
        let texts: Vec<&str> = batch.iter().flat_map(|r| [r.question.as_str(), r.context.as_str()]).collect();
        let mut vectors = embedder.embed_batch(&texts)?.into_iter();
        for r in batch {
            let (Some(q), Some(c)) = (vectors.next(), vectors.next()) else {
                return Err(EmbedError::EmbedderUnavailable("backend returned too few vectors".into()).into());
            };
            memory.insert_embedded(
                PatchInput {
                    query_text: r.question.clone(),
                    answer_text: r.answer.clone(),
                    context_text: r.context.clone(),
                    source: source.clone(),
                },
                q,
                c,
            )?;
        }
    }
    Ok(records.len())
}

/// Loads question/answer/context records from `path` into `memory` as
/// pre-t synthetic feedback at the current step (0 for a fresh memory).
pub fn populate_pre_t(memory: &Memory, path: &Path, embedder: &dyn Embedder) -> Result<usize, HarnessError> {
    let records = load_feedback_records(path)?;
    populate_records(memory, &records, PatchSource::PreTSynthetic, embedder)
}

/// Wall time from the first embedding call to the last committed insert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionLag {
    /// Whole milliseconds, rounded up so any non-zero duration is at least 1.
    pub per_batch_total: u64,
    pub per_patch_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub lag: CorrectionLag,
    pub elapsed: Duration,
    pub patch_ids: Vec<String>,
}

fn lag_from(elapsed: Duration, n: usize) -> CorrectionLag {
    let micros = elapsed.as_micros() as u64;
    CorrectionLag {
        per_batch_total: micros.div_ceil(1000),
        per_patch_mean: if n == 0 { 0.0 } else { micros as f64 / 1000.0 / n as f64 },
    }
}

fn feedback_source(item: &EvalItem) -> PatchSource {
    item.variant
        .as_ref()
        .map_or(PatchSource::Expert, |v| PatchSource::StressVariant(v.clone()))
}

/// Inserts every item's expert feedback at the current step and marks the
/// injection on the clock. All vectors are computed before the first insert,
/// so a backend failure leaves the memory untouched.
pub fn inject_expert_feedback(memory: &Memory, items: &[EvalItem], embedder: &dyn Embedder) -> Result<Injection, HarnessError> {
    if let Some(step) = memory.clock().feedback_injection_step {
        return Err(MemoryError::InjectionAlreadyMarked(step).into());
    }
    let started = Instant::now();
    let texts: Vec<&str> = items
        .iter()
        .flat_map(|i| [i.expert_feedback.paraphrased_query.as_str(), i.expert_feedback.context.as_str()])
        .collect();
    let vectors = embedder.embed_batch(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::EmbedderUnavailable("backend returned too few vectors".into()).into());
    }
    let mut vectors = vectors.into_iter();
    let mut patch_ids = Vec::with_capacity(items.len());
    for item in items {
        let (q, c) = (vectors.next().expect("length checked"), vectors.next().expect("length checked"));
        let patch = memory.insert_embedded(
            PatchInput {
                query_text: item.expert_feedback.paraphrased_query.clone(),
                answer_text: item.expert_feedback.answer.clone(),
                context_text: item.expert_feedback.context.clone(),
                source: feedback_source(item),
            },
            q,
            c,
        )?;
        patch_ids.push(patch.id.clone());
    }
    let elapsed = started.elapsed();
    memory.mark_injection()?;
    Ok(Injection {
        lag: lag_from(elapsed, items.len()),
        elapsed,
        patch_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIds {
    pub embedder: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub em: u8,
    pub f1: f64,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub pre_t: PhaseResult,
    pub post_t: PhaseResult,
}

impl ItemOutcome {
    pub fn records(&self) -> [MetricRecord; 2] {
        let rec = |r: &PhaseResult, phase| MetricRecord {
            item_id: self.item_id.clone(),
            em: r.em,
            f1: r.f1,
            phase,
        };
        [rec(&self.pre_t, Phase::PreT), rec(&self.post_t, Phase::PostT)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub dataset: String,
    pub metric: Metric,
    pub pre_t: f64,
    pub post_t: f64,
    pub gain: f64,
    pub n_items: usize,
    pub correction_lag_ms: CorrectionLag,
    pub config: RetrievalConfig,
    pub backends: BackendIds,
    pub seed: u64,
    pub per_item: Vec<ItemOutcome>,
}

impl SnapshotReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The report with timing fields zeroed; a deterministic function of the
    /// inputs under stub backends.
    pub fn without_timing(&self) -> Self {
        Self {
            correction_lag_ms: CorrectionLag {
                per_batch_total: 0,
                per_patch_mean: 0.0,
            },
            ..self.clone()
        }
    }

    pub fn canonical_json(&self) -> String {
        self.without_timing().to_json()
    }

    pub fn table_line(&self) -> String {
        format!("pre {:.1} post {:.1} gain {:+.1}", self.pre_t, self.post_t, self.gain)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SnapshotOptions {
    pub dataset: String,
    pub seed: u64,
    pub query: QueryOptions,
}

fn sorted_items(items: &[EvalItem]) -> Result<Vec<&EvalItem>, HarnessError> {
    let mut sorted: Vec<&EvalItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    for pair in sorted.windows(2) {
        if pair[0].item_id == pair[1].item_id {
            return Err(HarnessError::DuplicateItem(pair[0].item_id.clone()));
        }
    }
    Ok(sorted)
}

fn evaluate(
    item: &EvalItem,
    memory: &Memory,
    corpus: &Corpus,
    backends: &Backends,
    config: &RetrievalConfig,
    options: &SnapshotOptions,
    hidden: Option<&HashSet<String>>,
) -> Result<PhaseResult, HarnessError> {
    let outcome = answer_query(&item.query_text, memory, corpus, backends, config, options.query, |p| {
        hidden.is_none_or(|h| !h.contains(&p.id))
    })?;
    memory.advance_step();
    let rec = MetricRecord::score(&outcome.answer, &item.golds, &item.item_id, Phase::PreT)?;
    Ok(PhaseResult {
        em: rec.em,
        f1: rec.f1,
        answer: outcome.answer,
    })
}

/// Snapshot run in which injected patches stay hidden from the first
/// `delay_steps` post-t queries. `delay_steps = 0` is the immediate case.
#[allow(clippy::too_many_arguments)]
pub fn run_lagged_baseline(
    items: &[EvalItem],
    memory: &Memory,
    corpus: &Corpus,
    backends: &Backends,
    config: &RetrievalConfig,
    metric: Metric,
    options: &SnapshotOptions,
    delay_steps: u64,
) -> Result<SnapshotReport, HarnessError> {
    config.validate()?;
    if let Some(step) = memory.clock().feedback_injection_step {
        return Err(MemoryError::InjectionAlreadyMarked(step).into());
    }
    let ordered = sorted_items(items)?;

    let mut pre = Vec::with_capacity(ordered.len());
    for item in &ordered {
        pre.push(evaluate(item, memory, corpus, backends, config, options, None)?);
    }

    let owned: Vec<EvalItem> = ordered.iter().map(|i| (*i).clone()).collect();
    let injection = inject_expert_feedback(memory, &owned, backends.embedder.as_ref())?;
    let injected: HashSet<String> = injection.patch_ids.iter().cloned().collect();

    let mut post = Vec::with_capacity(ordered.len());
    let mut delayed_span = Duration::ZERO;
    for (j, item) in ordered.iter().enumerate() {
        let delayed = (j as u64) < delay_steps;
        let started = Instant::now();
        post.push(evaluate(item, memory, corpus, backends, config, options, delayed.then_some(&injected))?);
        if delayed {
            delayed_span += started.elapsed();
        }
    }

    let per_item: Vec<ItemOutcome> = ordered
        .iter()
        .zip(pre.into_iter().zip(post))
        .map(|(item, (pre_t, post_t))| ItemOutcome {
            item_id: item.item_id.clone(),
            pre_t,
            post_t,
        })
        .collect();
    let records: Vec<MetricRecord> = per_item.iter().flat_map(|o| o.records()).collect();
    let agg = aggregate(&records, metric).map_err(|e| match e {
        MetricsError::MixedMetricPhases => HarnessError::PhaseUniverseMismatch,
        other => other.into(),
    })?;
    let lag = lag_from(injection.elapsed + delayed_span, owned.len());
    Ok(SnapshotReport {
        dataset: options.dataset.clone(),
        metric,
        pre_t: agg.pre_t.unwrap_or(0.0),
        post_t: agg.post_t.unwrap_or(0.0),
        gain: agg.gain.unwrap_or(0.0),
        n_items: per_item.len(),
        correction_lag_ms: lag,
        config: *config,
        backends: BackendIds {
            embedder: backends.embedder.backend_id(),
            generator: backends.generator.backend_id(),
        },
        seed: options.seed,
        per_item,
    })
}

/// Evaluate, inject at `t`, evaluate again.
pub fn run_snapshot(
    items: &[EvalItem],
    memory: &Memory,
    corpus: &Corpus,
    backends: &Backends,
    config: &RetrievalConfig,
    metric: Metric,
    options: &SnapshotOptions,
) -> Result<SnapshotReport, HarnessError> {
    run_lagged_baseline(items, memory, corpus, backends, config, metric, options, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub pre_t: f64,
    pub post_t: f64,
}

/// One snapshot per lambda, each on a fresh copy of `memory`.
#[allow(clippy::too_many_arguments)]
pub fn run_lambda_sweep(
    items: &[EvalItem],
    memory: &Memory,
    corpus: &Corpus,
    backends: &Backends,
    base: &RetrievalConfig,
    lambdas: &[f64],
    metric: Metric,
    options: &SnapshotOptions,
) -> Result<Vec<SweepPoint>, HarnessError> {
    let mut seen: Vec<f64> = Vec::new();
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(HarnessError::InvalidArgument("lambda must be in [0,1]".into()));
        }
        if seen.contains(&l) {
            return Err(HarnessError::InvalidArgument(format!("duplicate lambda {l}")));
        }
        seen.push(l);
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let config = RetrievalConfig { lambda, ..*base };
            let copy = memory.clone();
            let report = run_snapshot(items, &copy, corpus, backends, &config, metric, options)?;
            Ok(SweepPoint {
                lambda,
                pre_t: report.pre_t,
                post_t: report.post_t,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StressVariant {
    Clean,
    Top1Evidence,
    Noise(f64),
    Blank,
    Vague,
    Conflict,
}

impl StressVariant {
    pub fn needs_seed(&self) -> bool {
        matches!(self, StressVariant::Noise(_) | StressVariant::Conflict)
    }
}

impl std::fmt::Display for StressVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StressVariant::Clean => f.write_str("clean"),
            StressVariant::Top1Evidence => f.write_str("top1"),
            StressVariant::Noise(x) => write!(f, "noise:{x}"),
            StressVariant::Blank => f.write_str("blank"),
            StressVariant::Vague => f.write_str("vague"),
            StressVariant::Conflict => f.write_str("conflict"),
        }
    }
}

impl std::str::FromStr for StressVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(StressVariant::Clean),
            "top1" => Ok(StressVariant::Top1Evidence),
            "blank" => Ok(StressVariant::Blank),
            "vague" => Ok(StressVariant::Vague),
            "conflict" => Ok(StressVariant::Conflict),
            other => {
                let frac = other
                    .strip_prefix("noise:")
                    .ok_or_else(|| format!("unknown stress variant {other:?}"))?;
                let f: f64 = frac.parse().map_err(|_| format!("bad noise fraction {frac:?}"))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(format!("noise fraction must be in [0,1], got {f}"));
                }
                Ok(StressVariant::Noise(f))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressSpec {
    pub variant: StressVariant,
    pub seed: Option<u64>,
}

/// `floor(fraction * n)`, tolerant of binary rounding just below an integer.
pub fn corrupted_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// A wrong answer for item `idx`: another item's answer that differs from
/// its own, or a marked copy of its own answer when none differs.
fn foreign_answer(answers: &[String], idx: usize, rng: &mut SplitMix64) -> String {
    let own = &answers[idx];
    let candidates: Vec<&String> = answers
        .iter()
        .enumerate()
        .filter(|(j, a)| *j != idx && *a != own)
        .map(|(_, a)| a)
        .collect();
    if candidates.is_empty() {
        format!("[corrupted] {own}").trim_end().to_string()
    } else {
        candidates[rng.below(candidates.len() as u64) as usize].clone()
    }
}

/// Indices whose answers a `noise(fraction)` run corrupts, and the new
/// answers, in permutation order.
fn noise_plan(answers: &[String], fraction: f64, rng: &mut SplitMix64) -> Vec<(usize, String)> {
    let n = answers.len();
    let m = corrupted_count(fraction, n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let chosen = &order[..m];
    let mut plan: Vec<(usize, String)> = if m >= 2 {
        let perm = rng.derangement(m);
        chosen.iter().enumerate().map(|(i, &idx)| (idx, answers[chosen[perm[i]]].clone())).collect()
    } else {
        chosen.iter().map(|&idx| (idx, answers[idx].clone())).collect()
    };
    for (idx, new) in plan.iter_mut() {
        if *new == answers[*idx] {
            *new = foreign_answer(answers, *idx, rng);
        }
    }
    plan
}

/// Transforms the expert feedback of `items` according to `spec`.
pub fn apply_stress(items: &[EvalItem], spec: &StressSpec, corpus: &Corpus, embedder: &dyn Embedder) -> Result<Vec<EvalItem>, HarnessError> {
    let name = spec.variant.to_string();
    let seed = match (spec.variant.needs_seed(), spec.seed) {
        (true, None) => return Err(HarnessError::SeedMissing(name)),
        (_, s) => s.unwrap_or(0),
    };
    let mut rng = SplitMix64::new(seed);
    let tagged = |item: &EvalItem| EvalItem {
        variant: Some(name.clone()),
        ..item.clone()
    };
    let answers: Vec<String> = items.iter().map(|i| i.expert_feedback.answer.clone()).collect();
    let out = match spec.variant {
        StressVariant::Clean => items.to_vec(),
        StressVariant::Top1Evidence => {
            if corpus.is_empty() {
                return Err(HarnessError::EmptyCorpus);
            }
            let queries: Vec<&str> = items.iter().map(|i| i.expert_feedback.paraphrased_query.as_str()).collect();
            let vectors = embedder.embed_batch(&queries)?;
            items
                .iter()
                .zip(vectors)
                .map(|(item, q)| {
                    let top = rank_contexts(&q, corpus, 1)?;
                    let mut out = tagged(item);
                    out.expert_feedback.context = top[0].doc.text.clone();
                    Ok(out)
                })
                .collect::<Result<Vec<_>, HarnessError>>()?
        }
        StressVariant::Noise(fraction) => {
            let mut out: Vec<EvalItem> = items.iter().map(tagged).collect();
            for (idx, answer) in noise_plan(&answers, fraction, &mut rng) {
                out[idx].expert_feedback.answer = answer;
            }
            out
        }
        StressVariant::Blank => items
            .iter()
            .map(|i| {
                let mut out = tagged(i);
                out.expert_feedback.answer.clear();
                out
            })
            .collect(),
        StressVariant::Vague => items
            .iter()
            .map(|i| {
                let mut out = tagged(i);
                out.expert_feedback.answer = VAGUE_TEMPLATE.replace("{answer}", &i.expert_feedback.answer);
                out
            })
            .collect(),
        StressVariant::Conflict => {
            let mut out = Vec::with_capacity(items.len() * 2);
            for (idx, item) in items.iter().enumerate() {
                let correct = tagged(item);
                let mut wrong = correct.clone();
                wrong.item_id = format!("{}#conflict", item.item_id);
                wrong.expert_feedback.answer = foreign_answer(&answers, idx, &mut rng);
                out.push(correct);
                out.push(wrong);
            }
            out
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::StubEmbedder;

    fn item(i: usize) -> EvalItem {
        EvalItem {
            item_id: format!("i{i:02}"),
            query_text: format!("query {i}"),
            golds: vec![format!("gold{i}")],
            expert_feedback: ExpertFeedback {
                paraphrased_query: format!("paraphrase {i}"),
                answer: format!("gold{i}"),
                context: format!("context {i}"),
            },
            variant: None,
        }
    }

    fn changed(a: &[EvalItem], b: &[EvalItem]) -> usize {
        a.iter().zip(b).filter(|(x, y)| x.expert_feedback.answer != y.expert_feedback.answer).count()
    }

    #[test]
    fn variant_grammar() {
        assert_eq!("noise:0.25".parse::<StressVariant>().unwrap(), StressVariant::Noise(0.25));
        assert_eq!("top1".parse::<StressVariant>().unwrap(), StressVariant::Top1Evidence);
        assert!("noise:1.25".parse::<StressVariant>().is_err());
        assert!("noise:x".parse::<StressVariant>().is_err());
        assert!("loud".parse::<StressVariant>().is_err());
    }

    #[test]
    fn item_line_round_trip_and_validation() {
        let i = item(3);
        assert_eq!(EvalItem::from_line(&i.to_line()).unwrap(), i);
        let bad = r#"{"id":"x","query":"same","golds":["g"],"fb_query":"same","fb_answer":"a","fb_context":"c"}"#;
        assert!(EvalItem::from_line(bad).is_err());
        let no_gold = r#"{"id":"x","query":"q","golds":[],"fb_query":"p","fb_answer":"a","fb_context":"c"}"#;
        assert!(EvalItem::from_line(no_gold).is_err());
    }

    #[test]
    fn noise_quarter_of_eight() {
        let items: Vec<_> = (0..8).map(item).collect();
        let spec = StressSpec {
            variant: StressVariant::Noise(0.25),
            seed: Some(11),
        };
        let out = apply_stress(&items, &spec, &Corpus::new(), &StubEmbedder::new(8).unwrap()).unwrap();
        assert_eq!(changed(&items, &out), 2);
    }

    #[test]
    fn noise_zero_is_identity_on_feedback() {
        let items: Vec<_> = (0..8).map(item).collect();
        let spec = StressSpec {
            variant: StressVariant::Noise(0.0),
            seed: Some(1),
        };
        let out = apply_stress(&items, &spec, &Corpus::new(), &StubEmbedder::new(8).unwrap()).unwrap();
        for (a, b) in items.iter().zip(&out) {
            assert_eq!(a.expert_feedback, b.expert_feedback);
            assert_eq!(a.query_text, b.query_text);
            assert_eq!(a.golds, b.golds);
        }
    }

    #[test]
    fn noise_requires_seed() {
        let spec = StressSpec {
            variant: StressVariant::Noise(0.5),
            seed: None,
        };
        let err = apply_stress(&[item(0)], &spec, &Corpus::new(), &StubEmbedder::new(8).unwrap()).unwrap_err();
        assert!(matches!(err, HarnessError::SeedMissing(_)));
    }

    #[test]
    fn noise_on_identical_answers_still_corrupts() {
        let items: Vec<_> = (0..4)
            .map(|i| {
                let mut it = item(i);
                it.expert_feedback.answer = "same".into();
                it
            })
            .collect();
        let spec = StressSpec {
            variant: StressVariant::Noise(1.0),
            seed: Some(5),
        };
        let out = apply_stress(&items, &spec, &Corpus::new(), &StubEmbedder::new(8).unwrap()).unwrap();
        assert_eq!(changed(&items, &out), 4);
    }

    #[test]
    fn top1_needs_corpus_and_uses_best_document() {
        let e = StubEmbedder::new(64).unwrap();
        let spec = StressSpec {
            variant: StressVariant::Top1Evidence,
            seed: None,
        };
        assert_eq!(apply_stress(&[item(0)], &spec, &Corpus::new(), &e), Err(HarnessError::EmptyCorpus));
        let corpus = Corpus::from_texts(
            &[("a".into(), "unrelated words here".into()), ("b".into(), "a paraphrase 0 passage".into())],
            &e,
        )
        .unwrap();
        let out = apply_stress(&[item(0)], &spec, &corpus, &e).unwrap();
        assert_eq!(out[0].expert_feedback.context, "a paraphrase 0 passage");
    }

    #[test]
    fn blank_and_vague() {
        let items: Vec<_> = (0..3).map(item).collect();
        let e = StubEmbedder::new(8).unwrap();
        let blank = apply_stress(&items, &StressSpec { variant: StressVariant::Blank, seed: None }, &Corpus::new(), &e).unwrap();
        assert!(blank.iter().all(|i| i.expert_feedback.answer.is_empty()));
        let vague = apply_stress(&items, &StressSpec { variant: StressVariant::Vague, seed: None }, &Corpus::new(), &e).unwrap();
        assert_eq!(
            vague[1].expert_feedback.answer,
            "Considering the relevant background, one finds that the matter in question relates to gold1 among other aspects discussed in the sources."
        );
    }

    #[test]
    fn conflict_doubles_items() {
        let items: Vec<_> = (0..5).map(item).collect();
        let spec = StressSpec {
            variant: StressVariant::Conflict,
            seed: Some(3),
        };
        let out = apply_stress(&items, &spec, &Corpus::new(), &StubEmbedder::new(8).unwrap()).unwrap();
        assert_eq!(out.len(), 10);
        for pair in out.chunks(2) {
            assert_eq!(pair[0].expert_feedback.paraphrased_query, pair[1].expert_feedback.paraphrased_query);
            assert_ne!(pair[0].expert_feedback.answer, pair[1].expert_feedback.answer);
        }
    }

    #[test]
    fn stress_is_deterministic_per_seed() {
        let items: Vec<_> = (0..16).map(item).collect();
        let e = StubEmbedder::new(8).unwrap();
        let spec = StressSpec {
            variant: StressVariant::Noise(0.5),
            seed: Some(42),
        };
        assert_eq!(apply_stress(&items, &spec, &Corpus::new(), &e).unwrap(), apply_stress(&items, &spec, &Corpus::new(), &e).unwrap());
        let other = StressSpec { seed: Some(43), ..spec };
        assert_ne!(apply_stress(&items, &spec, &Corpus::new(), &e).unwrap(), apply_stress(&items, &other, &Corpus::new(), &e).unwrap());
    }

    #[test]
    fn corrupted_count_is_floor() {
        assert_eq!(corrupted_count(0.25, 8), 2);
        assert_eq!(corrupted_count(0.75, 5), 3);
        assert_eq!(corrupted_count(0.29, 100), 29);
        assert_eq!(corrupted_count(1.0, 1), 1);
        assert_eq!(corrupted_count(0.5, 1), 0);
    }

    #[test]
    fn injection_marks_clock_once() {
        let m = Memory::new();
        let e = StubEmbedder::new(8).unwrap();
        let items: Vec<_> = (0..20).map(item).collect();
        let inj = inject_expert_feedback(&m, &items, &e).unwrap();
        assert_eq!(m.len(), 20);
        assert_eq!(inj.patch_ids.len(), 20);
        assert!(inj.elapsed > Duration::ZERO);
        assert!(inj.lag.per_batch_total >= 1);
        assert_eq!(m.clock().feedback_injection_step, Some(0));
        assert!(matches!(
            inject_expert_feedback(&m, &items, &e),
            Err(HarnessError::Memory(MemoryError::InjectionAlreadyMarked(0)))
        ));
    }

    #[test]
    fn sweep_rejects_duplicates_and_out_of_range() {
        let e: crate::embed::EmbedderRef = std::sync::Arc::new(StubEmbedder::new(8).unwrap());
        let backends = Backends {
            embedder: e,
            generator: std::sync::Arc::new(crate::generate::PatchCopyStub),
        };
        let run = |ls: &[f64]| {
            run_lambda_sweep(&[item(0)], &Memory::new(), &Corpus::new(), &backends, &RetrievalConfig::default(), ls, Metric::Em, &SnapshotOptions::default())
        };
        assert!(matches!(run(&[0.5, 0.5]), Err(HarnessError::InvalidArgument(_))));
        assert!(matches!(run(&[1.5]), Err(HarnessError::InvalidArgument(_))));
        assert_eq!(run(&[0.5]).unwrap().len(), 1);
    }
}
