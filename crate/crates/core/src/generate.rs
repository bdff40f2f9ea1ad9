//! Answer generation backends.
//!
//! `remote` talks to an OpenAI-compatible chat-completions endpoint. The two
//! stubs are pure functions of the prompt text:
//!
//! * `echo_stub` returns the target question from the last prompt line.
//! * `patch_copy_stub` returns the answer of the in-prompt exemplar whose
//!   question has the highest token F1 against the target question, or
//!   `UNKNOWN` when the prompt has no exemplars. Equal F1 keeps the earliest
//!   exemplar.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embed::{http_agent, InFlight};
use crate::metrics::token_f1;
use crate::prompt::{ANSWER_PREFIX, QUESTION_PREFIX};

pub const UNKNOWN_ANSWER: &str = "UNKNOWN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub answer_text: String,
    pub latency_ms: u64,
}

pub trait Generator: Send + Sync {
    fn backend_id(&self) -> String;

    fn generate(&self, prompt: &str) -> Result<Generation, GenerateError>;
}

pub type GeneratorRef = Arc<dyn Generator>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Remote,
    EchoStub,
    PatchCopyStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub api_key_env: String,
    pub max_in_flight: usize,
}

impl GeneratorConfig {
    pub fn stub(kind: GeneratorKind) -> Self {
        Self {
            kind,
            endpoint_url: None,
            model_name: None,
            max_tokens: 64,
            temperature: 0.0,
            timeout_ms: 60_000,
            api_key_env: "PATCHRAG_GEN_KEY".into(),
            max_in_flight: 4,
        }
    }

    /// Remote config from `PATCHRAG_GEN_URL` / `PATCHRAG_GEN_MODEL`; the key
    /// is read from `PATCHRAG_GEN_KEY` when the client is built.
    pub fn remote_from_env() -> Result<Self, GenerateError> {
        let url = std::env::var("PATCHRAG_GEN_URL")
            .map_err(|_| GenerateError::InvalidConfig("PATCHRAG_GEN_URL is not set".into()))?;
        Ok(Self {
            kind: GeneratorKind::Remote,
            endpoint_url: Some(url),
            model_name: std::env::var("PATCHRAG_GEN_MODEL").ok(),
            ..Self::stub(GeneratorKind::Remote)
        })
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.kind == GeneratorKind::Remote && self.endpoint_url.is_none() {
            return Err(GenerateError::InvalidConfig("remote generator requires endpoint_url".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GenerateError::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 || self.timeout_ms == 0 {
            return Err(GenerateError::InvalidConfig("max_tokens and timeout_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<GeneratorRef, GenerateError> {
        self.validate()?;
        Ok(match self.kind {
            GeneratorKind::EchoStub => Arc::new(EchoStub),
            GeneratorKind::PatchCopyStub => Arc::new(PatchCopyStub),
            GeneratorKind::Remote => Arc::new(RemoteGenerator::new(self)?),
        })
    }
}

fn check_prompt(prompt: &str) -> Result<(), GenerateError> {
    if prompt.trim().is_empty() {
        Err(GenerateError::EmptyPrompt)
    } else {
        Ok(())
    }
}

fn last_line(prompt: &str) -> &str {
    prompt.rsplit('\n').next().unwrap_or(prompt)
}

fn target_question(prompt: &str) -> &str {
    let line = last_line(prompt);
    line.strip_prefix(QUESTION_PREFIX).unwrap_or(line)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EchoStub;

impl Generator for EchoStub {
    fn backend_id(&self) -> String {
        "echo_stub".into()
    }

    fn generate(&self, prompt: &str) -> Result<Generation, GenerateError> {
        check_prompt(prompt)?;
        Ok(Generation {
            answer_text: target_question(prompt).to_string(),
            latency_ms: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PatchCopyStub;

/// `(question, answer)` exemplars in prompt order. The final line is the
/// target question and is never part of a pair.
pub fn parse_exemplars(prompt: &str) -> Vec<(&str, &str)> {
    let lines: Vec<&str> = prompt.split('\n').collect();
    let body = &lines[..lines.len().saturating_sub(1)];
    let mut pairs = Vec::new();
    let mut i = 0;
    while i + 1 < body.len() {
        if let (Some(q), Some(a)) = (body[i].strip_prefix(QUESTION_PREFIX), body[i + 1].strip_prefix(ANSWER_PREFIX)) {
            pairs.push((q, a));
            i += 2;
        } else {
            i += 1;
        }
    }
    pairs
}

impl PatchCopyStub {
    pub fn answer(prompt: &str) -> String {
        let target = target_question(prompt);
        let mut best: Option<(f64, &str)> = None;
        for (q, a) in parse_exemplars(prompt) {
            let f1 = token_f1(target, &[q]).unwrap_or(0.0);
            if best.is_none_or(|(b, _)| f1 > b) {
                best = Some((f1, a));
            }
        }
        best.map_or_else(|| UNKNOWN_ANSWER.to_string(), |(_, a)| a.to_string())
    }
}

impl Generator for PatchCopyStub {
    fn backend_id(&self) -> String {
        "patch_copy_stub".into()
    }

    fn generate(&self, prompt: &str) -> Result<Generation, GenerateError> {
        check_prompt(prompt)?;
        Ok(Generation {
            answer_text: Self::answer(prompt),
            latency_ms: 0,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible chat-completions client. The rendered prompt is sent
/// as a single user message; `endpoint_url` is the full
/// `.../chat/completions` URL.
pub struct RemoteGenerator {
    agent: ureq::Agent,
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    max_tokens: u32,
    temperature: f64,
    in_flight: InFlight,
}

impl RemoteGenerator {
    pub fn new(config: &GeneratorConfig) -> Result<Self, GenerateError> {
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| GenerateError::InvalidConfig("remote generator requires endpoint_url".into()))?;
        Ok(Self {
            agent: http_agent(config.timeout_ms),
            url,
            model: config.model_name.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            max_tokens: config.max_tokens,
            temperature: config.temperature,
            in_flight: InFlight::new(config.max_in_flight),
        })
    }
}

impl Generator for RemoteGenerator {
    fn backend_id(&self) -> String {
        format!("remote:{}", self.model.as_deref().unwrap_or("default"))
    }

    fn generate(&self, prompt: &str) -> Result<Generation, GenerateError> {
        check_prompt(prompt)?;
        let _slot = self.in_flight.acquire();
        let started = Instant::now();
        let mut body = json!({
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| GenerateError::GeneratorUnavailable(e.to_string()))?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| GenerateError::GeneratorUnavailable(format!("bad response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GenerateError::GeneratorUnavailable("response has no choices".into()))?;
        Ok(Generation {
            answer_text: content.trim().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
