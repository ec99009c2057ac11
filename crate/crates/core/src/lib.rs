//! Demonstration selection for in-context learning, built around comparable
//! demonstrations: pairs of examples where one text is a minimal edit of the
//! other and the label is flipped.
//!
//! The crate covers the whole evaluation loop: corpus ingestion with pair
//! validation, embedding caching and exact cosine retrieval, the five
//! selection strategies, bit-exact prompt rendering, an OpenAI-compatible
//! gateway with a deterministic offline mock, and the evaluation and
//! instruction-grading pipelines behind the `cdicl` command.
//!
//! Numeric retrieval code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common case.

pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod evaluation;
pub mod gateway;
pub mod prompting;
pub mod rng;
pub mod scalar;
pub mod selection;

mod digest;

pub use corpus::{CadPair, CdRole, Content, Corpus, Example, Label, TaskKind};
pub use evaluation::{Band, EvalRecord, Grade, InstructionRecord, RunReport};
pub use gateway::{CompletionRequest, MockProvider, MockRule, ProviderConfig, RemoteClient};
pub use prompting::{ParsedLabel, RenderedPrompt, TemplateKind, Verbalizer};
pub use scalar::Scalar;
pub use selection::{DemonstrationSet, SelectionPool, StrategyKind, StrategySpec};

/// Embedding vector with `f64` components.
pub type EmbeddingVector = embeddings::Embedding<f64>;
/// Embedding store with `f64` components.
pub type EmbeddingStore = embeddings::EmbeddingStore<f64>;
/// Embedding cache with `f64` components.
pub type EmbeddingCache = embeddings::EmbeddingCache<f64>;

/// Embedding vector with `f32` components.
pub type EmbeddingVectorF32 = embeddings::Embedding<f32>;
/// Embedding store with `f32` components.
pub type EmbeddingStoreF32 = embeddings::EmbeddingStore<f32>;
/// Embedding cache with `f32` components.
pub type EmbeddingCacheF32 = embeddings::EmbeddingCache<f32>;
