//! Core of the clinical extraction benchmark: configuration, prompt assembly,
//! output parsing, metrics, rank aggregation and variance analysis. Nothing
//! here performs network I/O; chat and embedding backends are traits.

pub mod analysis;
pub mod chat;
pub mod config;
pub mod embedding;
pub mod metrics;
pub mod parser;
pub mod prompt;
pub mod ranking;

pub use chat::{ChatBackend, ChatError, CompletionResult, Message, Role};
pub use config::{FieldKind, FieldSpec, FieldValue, MetricKind, ModelSpec, SamplingParams, TaskSpec};
pub use embedding::{Embedder, HashedNgramEmbedder};
pub use parser::{ExtractionRecord, ParsedRecord, RecordFlags};
pub use prompt::{Report, StrategyKind, StrategySpec};
