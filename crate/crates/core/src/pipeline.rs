//! End-to-end answering of one question: embed, retrieve patches and
//! passages, render the prompt, generate.

use std::time::Instant;

use thiserror::Error;

use crate::embed::{EmbedError, EmbedderRef};
use crate::generate::{GenerateError, GeneratorRef};
use crate::memory::{Corpus, FeedbackPatch, Memory};
use crate::prompt::{render_prompt, PromptBundle, PromptError, PromptMode, QaPair};
use crate::retrieval::{rank_contexts, rank_patches, RetrievalConfig, RetrievalError, RetrievalMode, ScoredPatch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

impl PipelineError {
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            PipelineError::Embed(EmbedError::EmbedderUnavailable(_))
                | PipelineError::Retrieval(RetrievalError::Embed(EmbedError::EmbedderUnavailable(_)))
                | PipelineError::Generate(GenerateError::GeneratorUnavailable(_))
        )
    }
}

#[derive(Clone)]
pub struct Backends {
    pub embedder: EmbedderRef,
    pub generator: GeneratorRef,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("embedder", &self.embedder.backend_id())
            .field("generator", &self.generator.backend_id())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsedContext {
    pub id: String,
    pub text: String,
    pub score: f64,
}

/// Everything that went into one answer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub answer: String,
    /// Exactly the patches rendered into the prompt, in prompt order.
    pub used_patches: Vec<ScoredPatch>,
    /// Exactly the passages rendered into the prompt, in prompt order.
    pub used_contexts: Vec<UsedContext>,
    pub prompt: String,
    pub latency_ms: u64,
}

fn bundle(mode: RetrievalMode, patches: &[ScoredPatch], contexts: &[UsedContext], question: &str) -> PromptBundle {
    PromptBundle {
        mode: if mode == RetrievalMode::CorpusQToC {
            PromptMode::StandardRag
        } else {
            PromptMode::Patchrag
        },
        qa_pairs: patches
            .iter()
            .map(|s| QaPair {
                question: s.patch.query_text.clone(),
                answer: s.patch.answer_text.clone(),
            })
            .collect(),
        contexts: contexts.iter().map(|c| c.text.clone()).collect(),
        target_question: question.to_string(),
    }
}

/// Renders the prompt, dropping the lowest-scored passages first and then
/// the lowest-scored patches until it fits in `max_chars` (if given). Both
/// lists are in descending score order, so dropping means popping.
pub fn fit_prompt(
    mode: RetrievalMode,
    patches: &mut Vec<ScoredPatch>,
    contexts: &mut Vec<UsedContext>,
    question: &str,
    max_chars: Option<usize>,
) -> Result<String, PromptError> {
    loop {
        let prompt = render_prompt(&bundle(mode, patches, contexts, question))?;
        let over = max_chars.is_some_and(|m| prompt.chars().count() > m);
        if !over {
            return Ok(prompt);
        }
        if contexts.pop().is_some() {
            continue;
        }
        if patches.pop().is_some() {
            continue;
        }
        return Ok(prompt);
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QueryOptions {
    pub max_prompt_chars: Option<usize>,
}

/// Answers `question`. `visible` filters which patches retrieval may see.
pub fn answer_query<F>(
    question: &str,
    memory: &Memory,
    corpus: &Corpus,
    backends: &Backends,
    config: &RetrievalConfig,
    options: QueryOptions,
    visible: F,
) -> Result<QueryOutcome, PipelineError>
where
    F: Fn(&FeedbackPatch) -> bool + Sync,
{
    config.validate()?;
    let started = Instant::now();
    let query = backends.embedder.embed(question)?;
    let mut patches = {
        let view = memory.view();
        rank_patches(&query, view.patches(), config, visible)?
    };
    let mut contexts: Vec<UsedContext> = rank_contexts(&query, corpus, config.n_contexts)?
        .into_iter()
        .map(|d| UsedContext {
            id: d.doc.id.clone(),
            text: d.doc.text.clone(),
            score: d.score,
        })
        .collect();
    let prompt = fit_prompt(config.mode, &mut patches, &mut contexts, question, options.max_prompt_chars)?;
    let generation = backends.generator.generate(&prompt)?;
    Ok(QueryOutcome {
        answer: generation.answer_text,
        used_patches: patches,
        used_contexts: contexts,
        prompt,
        latency_ms: started.elapsed().as_millis() as u64,
    })
}
