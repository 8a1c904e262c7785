//! Chat message types and the completion capability the prompt engine drives.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::SamplingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Human,
    Assistant,
}

impl Role {
    /// Role name on the OpenAI-compatible wire.
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::Human => "user",
            Role::Assistant => "assistant",
        }
    }

    pub fn from_wire(name: &str) -> Option<Role> {
        match name {
            "system" => Some(Role::System),
            "user" | "human" => Some(Role::Human),
            "assistant" | "ai" => Some(Role::Assistant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn human(content: impl Into<String>) -> Self {
        Message { role: Role::Human, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// Content of the last human message, if any.
pub fn last_human(messages: &[Message]) -> Option<&str> {
    messages.iter().rev().find(|m| m.role == Role::Human).map(|m| m.content.as_str())
}

/// One answered chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Wall-clock seconds of the successful attempt.
    pub latency_s: f64,
    pub model_id: String,
    pub request_hash: String,
    #[serde(default)]
    pub retries: u32,
    #[serde(skip)]
    pub from_cache: bool,
}

impl CompletionResult {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChatError {
    #[error("request timed out after {after_secs:.3}s")]
    Timeout { after_secs: f64 },
    #[error("server answered HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts; last error: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no cached response for request {0} (replay mode)")]
    CacheMiss(String),
}

/// Anything that can answer a chat request for one model.
pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn chat(&self, messages: &[Message], params: &SamplingParams) -> Result<CompletionResult, ChatError>;
}

/// Stable identity of a request: sha256 over model, sampling params and messages.
pub fn request_hash(model: &str, params: &SamplingParams, messages: &[Message]) -> String {
    let canonical = serde_json::json!({
        "model": model,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "top_k": params.top_k,
        "messages": messages,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Chat backend built from a closure; used for scripted models in tests and dry runs.
pub struct FnChat<F> {
    model: String,
    respond: F,
}

impl<F> FnChat<F>
where
    F: Fn(&[Message], &SamplingParams) -> Result<String, ChatError> + Send + Sync,
{
    pub fn new(model: impl Into<String>, respond: F) -> Self {
        FnChat { model: model.into(), respond }
    }
}

impl<F> ChatBackend for FnChat<F>
where
    F: Fn(&[Message], &SamplingParams) -> Result<String, ChatError> + Send + Sync,
{
    fn model_id(&self) -> &str {
        &self.model
    }

    fn chat(&self, messages: &[Message], params: &SamplingParams) -> Result<CompletionResult, ChatError> {
        let text = (self.respond)(messages, params)?;
        let prompt_tokens = messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum();
        Ok(CompletionResult {
            prompt_tokens,
            completion_tokens: text.split_whitespace().count() as u64,
            latency_s: 1e-3,
            model_id: self.model.clone(),
            request_hash: request_hash(&self.model, params, messages),
            retries: 0,
            from_cache: false,
            text,
        })
    }
}
