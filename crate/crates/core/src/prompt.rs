//! Generation prompts.
//!
//! Both layouts are plain text joined with `\n`, with no trailing newline.
//! The instruction blocks are reproduced line for line, including the
//! trailing space on each wrapped line. Placeholder text is inserted
//! verbatim: nothing is escaped, so a context containing `Question:` reaches
//! the generator unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const PATCHRAG_INSTRUCTION: [&str; 5] = [
    "Please answer the below question based on given ",
    "above question and answer pairs and contexts. ",
    "Note that you should generate the response only ",
    "for answering the question within a few words. ",
    "Do not contain extra comments.",
];

const STANDARD_RAG_INSTRUCTION: [&str; 4] = [
    "Please answer the below question based on given ",
    "above contexts. Note that you should generate ",
    "the response only for answering the question ",
    "within a few words. Do not contain extra comments.",
];

pub const QUESTION_PREFIX: &str = "Question: ";
pub const ANSWER_PREFIX: &str = "Answer: ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("prompt invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Patchrag,
    StandardRag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub mode: PromptMode,
    /// In retrieval-score order; rendered as given.
    pub qa_pairs: Vec<QaPair>,
    pub contexts: Vec<String>,
    pub target_question: String,
}

impl PromptBundle {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.target_question.trim().is_empty() {
            return Err(PromptError::InvariantViolation("target question is empty".into()));
        }
        if self.mode == PromptMode::StandardRag && !self.qa_pairs.is_empty() {
            return Err(PromptError::InvariantViolation(
                "standard_rag prompts carry no question/answer pairs".into(),
            ));
        }
        Ok(())
    }
}

pub fn render_prompt(bundle: &PromptBundle) -> Result<String, PromptError> {
    bundle.validate()?;
    let mut lines: Vec<String> = Vec::with_capacity(bundle.qa_pairs.len() * 2 + bundle.contexts.len() + 6);
    for pair in &bundle.qa_pairs {
        lines.push(format!("{QUESTION_PREFIX}{}", pair.question));
        lines.push(format!("{ANSWER_PREFIX}{}", pair.answer));
    }
    for (i, ctx) in bundle.contexts.iter().enumerate() {
        lines.push(format!("Context{}: {ctx}", i + 1));
    }
    let instruction: &[&str] = match bundle.mode {
        PromptMode::Patchrag => &PATCHRAG_INSTRUCTION,
        PromptMode::StandardRag => &STANDARD_RAG_INSTRUCTION,
    };
    lines.extend(instruction.iter().map(|s| s.to_string()));
    lines.push(format!("{QUESTION_PREFIX}{}", bundle.target_question));
    Ok(lines.join("\n"))
}
