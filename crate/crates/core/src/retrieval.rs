//! Dual intent/context scoring of feedback patches and content retrieval
//! over the corpus.
//!
//! A patch `(q_i, a_i, c_i)` is scored against a query `q` as
//! `lambda * cos(q, q_i) + (1 - lambda) * cos(q, c_i)`. Retrieval is an
//! exhaustive scan; results are totally ordered by score (descending), then
//! insertion step, then id.

use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, Embedder, EmbeddingVector};
use crate::memory::{Corpus, CorpusDocument, FeedbackPatch, Memory};

/// Memories at least this large are scored in parallel chunks.
const PARALLEL_THRESHOLD: usize = 8192;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Lambda-weighted mix of intent and context similarity.
    Dual,
    /// Query-to-query matching only.
    IntentOnly,
    /// Query-to-evidence matching only.
    ContextOnly,
    /// Standard RAG: no feedback patches, corpus passages only.
    CorpusQToC,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(RetrievalMode::Dual),
            "intent_only" | "q2q" => Ok(RetrievalMode::IntentOnly),
            "context_only" => Ok(RetrievalMode::ContextOnly),
            "corpus_q_to_c" | "q2c" => Ok(RetrievalMode::CorpusQToC),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub lambda: f64,
    pub k_feedback: usize,
    pub n_contexts: usize,
    pub mode: RetrievalMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            k_feedback: 5,
            n_contexts: 5,
            mode: RetrievalMode::Dual,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RetrievalError::InvalidConfig("lambda must be in [0,1]".into()));
        }
        if self.k_feedback == 0 {
            return Err(RetrievalError::InvalidConfig("k_feedback must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPatch {
    pub patch: Arc<FeedbackPatch>,
    pub score: f64,
    pub intent_sim: f64,
    pub context_sim: f64,
}

pub fn score_patch(query: &EmbeddingVector, patch: &Arc<FeedbackPatch>, lambda: f64) -> Result<ScoredPatch, RetrievalError> {
    let intent_sim = cosine(query, &patch.query_embedding)?;
    let context_sim = cosine(query, &patch.context_embedding)?;
    Ok(ScoredPatch {
        patch: Arc::clone(patch),
        score: lambda * intent_sim + (1.0 - lambda) * context_sim,
        intent_sim,
        context_sim,
    })
}

fn score_for_mode(query: &EmbeddingVector, patch: &Arc<FeedbackPatch>, config: &RetrievalConfig) -> Result<ScoredPatch, RetrievalError> {
    let mut scored = score_patch(query, patch, config.lambda)?;
    scored.score = match config.mode {
        RetrievalMode::Dual => scored.score,
        RetrievalMode::IntentOnly => scored.intent_sim,
        RetrievalMode::ContextOnly => scored.context_sim,
        RetrievalMode::CorpusQToC => unreachable!("q-to-c mode does not score patches"),
    };
    Ok(scored)
}

/// Deterministic ranking order: score descending, then earlier step, then id.
pub fn patch_order(a: &ScoredPatch, b: &ScoredPatch) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.patch.inserted_at_step.cmp(&b.patch.inserted_at_step))
        .then_with(|| a.patch.id.cmp(&b.patch.id))
}

fn top_k<T, F>(mut items: Vec<T>, k: usize, cmp: F) -> Vec<T>
where
    F: Fn(&T, &T) -> Ordering,
{
    if k == 0 {
        return Vec::new();
    }
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items.sort_by(&cmp);
    items
}

/// Ranks the given patches against a query embedding. Patches for which
/// `visible` returns false are skipped.
pub fn rank_patches<F>(
    query: &EmbeddingVector,
    patches: &[Arc<FeedbackPatch>],
    config: &RetrievalConfig,
    visible: F,
) -> Result<Vec<ScoredPatch>, RetrievalError>
where
    F: Fn(&FeedbackPatch) -> bool + Sync,
{
    if config.mode == RetrievalMode::CorpusQToC {
        return Ok(Vec::new());
    }
    let scored: Vec<ScoredPatch> = if patches.len() >= PARALLEL_THRESHOLD {
        let chunk = patches.len().div_ceil(rayon::current_num_threads().max(1));
        let partial: Result<Vec<Vec<ScoredPatch>>, RetrievalError> = patches
            .par_chunks(chunk.max(1))
            .map(|part| {
                let local: Result<Vec<_>, _> = part
                    .iter()
                    .filter(|p| visible(p))
                    .map(|p| score_for_mode(query, p, config))
                    .collect();
                local.map(|v| top_k(v, config.k_feedback, patch_order))
            })
            .collect();
        partial?.into_iter().flatten().collect()
    } else {
        patches
            .iter()
            .filter(|p| visible(p))
            .map(|p| score_for_mode(query, p, config))
            .collect::<Result<_, _>>()?
    };
    Ok(top_k(scored, config.k_feedback, patch_order))
}

pub fn retrieve_feedback_for_embedding(
    query: &EmbeddingVector,
    memory: &Memory,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredPatch>, RetrievalError> {
    let view = memory.view();
    rank_patches(query, view.patches(), config, |_| true)
}

/// Top-k feedback patches for `query_text`. An empty memory yields an empty
/// list.
pub fn retrieve_feedback(
    query_text: &str,
    memory: &Memory,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredPatch>, RetrievalError> {
    config.validate()?;
    if config.mode == RetrievalMode::CorpusQToC {
        return Ok(Vec::new());
    }
    let query = embedder.embed(query_text)?;
    retrieve_feedback_for_embedding(&query, memory, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDocument<'a> {
    pub doc: &'a CorpusDocument,
    pub score: f64,
    /// Position in the corpus; plays the role of the insertion step in ties.
    pub position: usize,
}

fn doc_order(a: &ScoredDocument<'_>, b: &ScoredDocument<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.position.cmp(&b.position))
        .then_with(|| a.doc.id.cmp(&b.doc.id))
}

pub fn rank_contexts<'a>(query: &EmbeddingVector, corpus: &'a Corpus, n: usize) -> Result<Vec<ScoredDocument<'a>>, RetrievalError> {
    if n == 0 || corpus.is_empty() {
        return Ok(Vec::new());
    }
    let scored = corpus
        .docs()
        .iter()
        .enumerate()
        .map(|(position, doc)| {
            Ok(ScoredDocument {
                doc,
                score: cosine(query, &doc.embedding)?,
                position,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(top_k(scored, n, doc_order))
}

/// Top-n corpus passages by cosine similarity to the query.
pub fn retrieve_contexts<'a>(
    query_text: &str,
    corpus: &'a Corpus,
    embedder: &dyn Embedder,
    n: usize,
) -> Result<Vec<ScoredDocument<'a>>, RetrievalError> {
    if n == 0 || corpus.is_empty() {
        return Ok(Vec::new());
    }
    let query = embedder.embed(query_text)?;
    rank_contexts(&query, corpus, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::StubEmbedder;
    use crate::memory::{PatchInput, PatchSource};

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    fn patch(id: &str, step: u64, q: &[f64], c: &[f64]) -> Arc<FeedbackPatch> {
        Arc::new(FeedbackPatch {
            id: id.into(),
            query_text: id.into(),
            answer_text: String::new(),
            context_text: String::new(),
            query_embedding: unit(q),
            context_embedding: unit(c),
            inserted_at_step: step,
            inserted_at_wall: 0,
            source: PatchSource::PreTSynthetic,
        })
    }

    fn cfg(lambda: f64, k: usize, mode: RetrievalMode) -> RetrievalConfig {
        RetrievalConfig {
            lambda,
            k_feedback: k,
            n_contexts: 5,
            mode,
        }
    }

    #[test]
    fn score_hand_examples() {
        let q = unit(&[1.0, 0.0]);
        let p = patch("p", 0, &[1.0, 0.0], &[0.0, 1.0]);
        let s = score_patch(&q, &p, 0.5).unwrap();
        assert_eq!((s.intent_sim, s.context_sim, s.score), (1.0, 0.0, 0.5));
        assert_eq!(score_patch(&q, &p, 1.0).unwrap().score, 1.0);
        assert_eq!(score_patch(&q, &p, 0.0).unwrap().score, 0.0);
    }

    #[test]
    fn score_dimension_mismatch() {
        let q = unit(&[1.0, 0.0, 0.0]);
        let p = patch("p", 0, &[1.0, 0.0], &[0.0, 1.0]);
        assert!(matches!(score_patch(&q, &p, 0.5), Err(RetrievalError::Embed(EmbedError::DimensionMismatch { .. }))));
    }

    #[test]
    fn top_k_in_order() {
        // Context-only scores 0.9, 0.5, 0.1 against q = e0.
        let q = unit(&[1.0, 0.0]);
        let lo = patch("lo", 0, &[0.0, 1.0], &[0.1, (1.0f64 - 0.01).sqrt()]);
        let hi = patch("hi", 0, &[0.0, 1.0], &[0.9, (1.0f64 - 0.81).sqrt()]);
        let mid = patch("mid", 0, &[0.0, 1.0], &[0.5, (1.0f64 - 0.25).sqrt()]);
        let all = vec![lo, hi, mid];
        let out = rank_patches(&q, &all, &cfg(0.0, 2, RetrievalMode::Dual), |_| true).unwrap();
        let ids: Vec<_> = out.iter().map(|s| s.patch.id.as_str()).collect();
        assert_eq!(ids, ["hi", "mid"]);
        let out = rank_patches(&q, &all, &cfg(0.0, 10, RetrievalMode::Dual), |_| true).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].patch.id, "lo");
    }

    #[test]
    fn ties_prefer_earlier_step_then_id() {
        let q = unit(&[1.0, 0.0]);
        let all = vec![
            patch("b", 1, &[1.0, 0.0], &[1.0, 0.0]),
            patch("z", 0, &[1.0, 0.0], &[1.0, 0.0]),
            patch("a", 1, &[1.0, 0.0], &[1.0, 0.0]),
        ];
        let out = rank_patches(&q, &all, &cfg(0.5, 3, RetrievalMode::Dual), |_| true).unwrap();
        let ids: Vec<_> = out.iter().map(|s| s.patch.id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "b"]);
    }

    #[test]
    fn empty_memory_gives_empty_list() {
        let m = Memory::new();
        let e = StubEmbedder::new(8).unwrap();
        assert!(retrieve_feedback("anything", &m, &e, &RetrievalConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn q_to_c_mode_skips_feedback() {
        let m = Memory::new();
        let e = StubEmbedder::new(8).unwrap();
        m.insert_patch(
            PatchInput {
                query_text: "q".into(),
                answer_text: "a".into(),
                context_text: "c".into(),
                source: PatchSource::Expert,
            },
            &e,
        )
        .unwrap();
        let config = cfg(0.5, 5, RetrievalMode::CorpusQToC);
        assert!(retrieve_feedback("q", &m, &e, &config).unwrap().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1.5, 5, RetrievalMode::Dual).validate().is_err());
        assert!(cfg(-0.1, 5, RetrievalMode::Dual).validate().is_err());
        assert!(cfg(0.5, 0, RetrievalMode::Dual).validate().is_err());
        assert!(cfg(0.0, 1, RetrievalMode::Dual).validate().is_ok());
    }

    #[test]
    fn contexts_edge_cases() {
        let e = StubEmbedder::new(8).unwrap();
        let corpus = Corpus::from_texts(&[("d1".into(), "only doc".into())], &e).unwrap();
        let out = retrieve_contexts("query", &corpus, &e, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].doc.id, "d1");
        assert!(retrieve_contexts("query", &corpus, &e, 0).unwrap().is_empty());
        assert!(retrieve_contexts("query", &Corpus::new(), &e, 3).unwrap().is_empty());
    }

    #[test]
    fn parallel_scan_matches_sequential() {
        let e = StubEmbedder::new(8).unwrap();
        let patches: Vec<_> = (0..PARALLEL_THRESHOLD + 500)
            .map(|i| {
                let q = e.embed_one(&format!("w{} w{}", i % 31, i % 17)).unwrap();
                let c = e.embed_one(&format!("c{} w{}", i % 11, i % 7)).unwrap();
                Arc::new(FeedbackPatch {
                    id: format!("p{i:06}"),
                    query_text: String::new(),
                    answer_text: String::new(),
                    context_text: String::new(),
                    query_embedding: q,
                    context_embedding: c,
                    inserted_at_step: (i / 1000) as u64,
                    inserted_at_wall: 0,
                    source: PatchSource::PreTSynthetic,
                })
            })
            .collect();
        let q = e.embed_one("w3 w5 c2").unwrap();
        let config = cfg(0.5, 25, RetrievalMode::Dual);
        let parallel = rank_patches(&q, &patches, &config, |_| true).unwrap();
        let mut sequential: Vec<_> = patches.iter().map(|p| score_patch(&q, p, 0.5).unwrap()).collect();
        sequential.sort_by(patch_order);
        sequential.truncate(25);
        assert_eq!(parallel, sequential);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
        }

        proptest! {
            #[test]
            fn score_is_affine_in_lambda(q in vec_strategy(6), a in vec_strategy(6), b in vec_strategy(6)) {
                let q = unit(&q);
                let p = patch("p", 0, &a, &b);
                let s0 = score_patch(&q, &p, 0.0).unwrap().score;
                let s1 = score_patch(&q, &p, 1.0).unwrap().score;
                let mid = score_patch(&q, &p, 0.5).unwrap().score;
                prop_assert!((mid - (s0 + s1) / 2.0).abs() <= 1e-12);
            }

            #[test]
            fn adding_a_low_scoring_patch_keeps_top_k(vs in proptest::collection::vec((vec_strategy(4), vec_strategy(4)), 3..30), k in 1usize..5) {
                let q = unit(&[1.0, 0.0, 0.0, 0.0]);
                let mut patches: Vec<_> = vs.iter().enumerate().map(|(i, (a, b))| patch(&format!("p{i:03}"), 0, a, b)).collect();
                let config = cfg(0.5, k, RetrievalMode::Dual);
                let before = rank_patches(&q, &patches, &config, |_| true).unwrap();
                prop_assume!(before.len() == k);
                let kth = before[k - 1].score;
                // Pointing away from q on both components scores -1, strictly below
                // kth unless kth is already -1.
                prop_assume!(kth > -1.0 + 1e-9);
                patches.push(patch("zz", 0, &[-1.0, 0.0, 0.0, 0.0], &[-1.0, 0.0, 0.0, 0.0]));
                let after = rank_patches(&q, &patches, &config, |_| true).unwrap();
                prop_assert_eq!(before, after);
            }
        }
    }
}
