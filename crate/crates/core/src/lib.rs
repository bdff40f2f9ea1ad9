//! Feedback-patch retrieval-augmented generation.
//!
//! Expert corrections are stored as `(question, answer, evidence)` patches,
//! retrieved by a lambda-weighted mix of intent and context similarity and
//! placed in the generation prompt as exemplars. The [`harness`] measures how
//! quickly and how well such corrections take effect.

pub mod embed;
pub mod fsutil;
pub mod generate;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod rng;

pub use embed::{cosine, Embedder, EmbedderConfig, EmbedderKind, EmbedderRef, EmbeddingVector, StubEmbedder};
pub use generate::{Generator, GeneratorConfig, GeneratorKind, GeneratorRef, PatchCopyStub};
pub use harness::{EvalItem, SnapshotReport, StressSpec, StressVariant};
pub use memory::{Corpus, CorpusDocument, FeedbackPatch, Memory, PatchInput, PatchSource, StepClock};
pub use metrics::Metric;
pub use pipeline::Backends;
pub use retrieval::{RetrievalConfig, RetrievalMode, ScoredPatch};
