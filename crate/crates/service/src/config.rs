//! Service configuration: one flat TOML table.
//!
//! ```toml
//! bind_address = "127.0.0.1:8080"
//! memory_path = "memory.jsonl"
//! corpus_path = "corpus.jsonl"
//! lambda = 0.5
//! embedder = "stub"
//! embed_dim = 1024
//! generator = "patch_copy_stub"
//! auth_token = "change-me"
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use patchrag_core::embed::{EmbedderConfig, EmbedderKind};
use patchrag_core::generate::{GeneratorConfig, GeneratorKind};
use patchrag_core::{RetrievalConfig, RetrievalMode};
use serde::Deserialize;

pub const CONFIG_ENV: &str = "PATCHRAG_CONFIG";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind_address: String,
    /// Patch memory; created when missing and appended to on every write.
    pub memory_path: PathBuf,
    pub corpus_path: Option<PathBuf>,

    pub lambda: f64,
    pub k_feedback: usize,
    pub n_contexts: usize,
    pub mode: String,
    pub max_prompt_chars: Option<usize>,

    /// `stub` or `remote`.
    pub embedder: String,
    pub embed_dim: usize,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
    pub embed_api_key_env: String,
    pub embed_timeout_ms: u64,

    /// `patch_copy_stub`, `echo_stub` or `remote`.
    pub generator: String,
    pub gen_url: Option<String>,
    pub gen_model: Option<String>,
    pub gen_api_key_env: String,
    pub gen_timeout_ms: u64,
    pub gen_max_tokens: u32,
    pub gen_temperature: f64,

    pub max_in_flight: usize,
    /// When set, `POST /v1/feedback` requires `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let retrieval = RetrievalConfig::default();
        let embed = EmbedderConfig::stub(1024);
        let gen = GeneratorConfig::stub(GeneratorKind::PatchCopyStub);
        Self {
            bind_address: "127.0.0.1:8080".into(),
            memory_path: PathBuf::from("memory.jsonl"),
            corpus_path: None,
            lambda: retrieval.lambda,
            k_feedback: retrieval.k_feedback,
            n_contexts: retrieval.n_contexts,
            mode: "dual".into(),
            max_prompt_chars: None,
            embedder: "stub".into(),
            embed_dim: embed.dim,
            embed_url: None,
            embed_model: None,
            embed_api_key_env: embed.api_key_env,
            embed_timeout_ms: embed.timeout_ms,
            generator: "patch_copy_stub".into(),
            gen_url: None,
            gen_model: None,
            gen_api_key_env: gen.api_key_env,
            gen_timeout_ms: gen.timeout_ms,
            gen_max_tokens: gen.max_tokens,
            gen_temperature: gen.temperature,
            max_in_flight: embed.max_in_flight,
            auth_token: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).context("invalid service config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Loads the file named by `PATCHRAG_CONFIG`.
    pub fn from_env() -> anyhow::Result<Self> {
        let path = std::env::var(CONFIG_ENV).with_context(|| format!("{CONFIG_ENV} is not set"))?;
        Self::load(Path::new(&path))
    }

    pub fn bind_addr(&self) -> anyhow::Result<SocketAddr> {
        self.bind_address
            .parse()
            .with_context(|| format!("bind_address {:?} is not host:port", self.bind_address))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.bind_addr()?;
        self.retrieval()?.validate()?;
        self.embedder_config()?.validate()?;
        self.generator_config()?.validate()?;
        if self.auth_token.as_deref().is_some_and(|t| t.trim().is_empty()) {
            bail!("auth_token must not be blank");
        }
        Ok(())
    }

    pub fn retrieval(&self) -> anyhow::Result<RetrievalConfig> {
        let mode: RetrievalMode = self.mode.parse().map_err(anyhow::Error::msg)?;
        Ok(RetrievalConfig {
            lambda: self.lambda,
            k_feedback: self.k_feedback,
            n_contexts: self.n_contexts,
            mode,
        })
    }

    pub fn embedder_config(&self) -> anyhow::Result<EmbedderConfig> {
        let kind = match self.embedder.as_str() {
            "stub" | "deterministic_stub" => EmbedderKind::DeterministicStub,
            "remote" => EmbedderKind::Remote,
            other => bail!("unknown embedder {other:?}"),
        };
        Ok(EmbedderConfig {
            kind,
            endpoint_url: self.embed_url.clone(),
            model_name: self.embed_model.clone(),
            dim: self.embed_dim,
            timeout_ms: self.embed_timeout_ms,
            api_key_env: self.embed_api_key_env.clone(),
            max_in_flight: self.max_in_flight,
        })
    }

    pub fn generator_config(&self) -> anyhow::Result<GeneratorConfig> {
        let kind = match self.generator.as_str() {
            "patch_copy_stub" => GeneratorKind::PatchCopyStub,
            "echo_stub" => GeneratorKind::EchoStub,
            "remote" => GeneratorKind::Remote,
            other => bail!("unknown generator {other:?}"),
        };
        Ok(GeneratorConfig {
            kind,
            endpoint_url: self.gen_url.clone(),
            model_name: self.gen_model.clone(),
            max_tokens: self.gen_max_tokens,
            temperature: self.gen_temperature,
            timeout_ms: self.gen_timeout_ms,
            api_key_env: self.gen_api_key_env.clone(),
            max_in_flight: self.max_in_flight,
        })
    }
}
