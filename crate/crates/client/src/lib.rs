//! HTTP side of the benchmark: an OpenAI-compatible chat and embedding
//! client with response caching, retries and bounded concurrency, and a
//! scripted mock server speaking the same protocol.

mod client;
mod embed;
pub mod mock;
mod semaphore;

pub use client::{throughput, CacheMode, ChatClient, ResponseCache, ThroughputError, API_KEY_ENV};
pub use embed::RemoteEmbedder;
pub use mock::{LoggedRequest, MockError, MockServer, Rule, Script};
pub use semaphore::{Permit, Semaphore};
