use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clinex_core::chat::{request_hash, ChatBackend, ChatError, CompletionResult, Message};
use clinex_core::config::{ModelSpec, SamplingParams};
use serde_json::{json, Value};

use crate::semaphore::Semaphore;

/// Environment variable holding the bearer token sent to endpoints.
pub const API_KEY_ENV: &str = "CLINEX_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheMode {
    #[default]
    Off,
    /// Serve hits from the cache and store new responses.
    ReadWrite,
    /// Serve hits only; a miss is an error and nothing is sent.
    Replay,
}

impl std::str::FromStr for CacheMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(CacheMode::Off),
            "on" | "read-write" | "rw" => Ok(CacheMode::ReadWrite),
            "replay" => Ok(CacheMode::Replay),
            other => Err(format!("unknown cache mode `{other}` (off, on, replay)")),
        }
    }
}

impl std::fmt::Display for CacheMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CacheMode::Off => "off",
            CacheMode::ReadWrite => "on",
            CacheMode::Replay => "replay",
        })
    }
}

/// One JSON file per request hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Option<CompletionResult> {
        let text = fs::read_to_string(self.path(hash)).ok()?;
        let mut result: CompletionResult = serde_json::from_str(&text).ok()?;
        result.from_cache = true;
        Some(result)
    }

    pub fn put(&self, result: &CompletionResult) -> std::io::Result<()> {
        let path = self.path(&result.request_hash);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, serde_json::to_vec_pretty(result).expect("completion serializes"))?;
        fs::rename(tmp, path)
    }
}

pub(crate) fn agent(timeout_secs: f64) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(Duration::from_secs_f64(timeout_secs)).build()
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

enum Attempt {
    Done(Value),
    Retry(ChatError),
    Fail(ChatError),
}

/// Posts `body` to `url`, classifying the outcome for the retry loop.
pub(crate) fn post_json(agent: &ureq::Agent, url: &str, body: &Value, timeout_secs: f64) -> Result<Value, (ChatError, bool)> {
    let mut req = agent.post(url);
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    let attempt = match req.send_json(body.clone()) {
        Ok(resp) => match resp.into_json::<Value>() {
            Ok(v) => Attempt::Done(v),
            Err(e) if e.kind() == ErrorKind::TimedOut || e.kind() == ErrorKind::WouldBlock => {
                Attempt::Fail(ChatError::Timeout { after_secs: timeout_secs })
            }
            Err(e) => Attempt::Fail(ChatError::Protocol(e.to_string())),
        },
        Err(ureq::Error::Status(status, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            let err = ChatError::Http { status, body };
            if status == 429 || status >= 500 {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            }
        }
        Err(ureq::Error::Transport(t)) if is_timeout(&t) => Attempt::Fail(ChatError::Timeout { after_secs: timeout_secs }),
        Err(ureq::Error::Transport(t)) => Attempt::Retry(ChatError::Transport(t.to_string())),
    };
    match attempt {
        Attempt::Done(v) => Ok(v),
        Attempt::Retry(e) => Err((e, true)),
        Attempt::Fail(e) => Err((e, false)),
    }
}

/// Retries transient failures with exponential backoff: `backoff_ms`, then doubled.
pub(crate) fn with_retries<T>(
    max_retries: u32,
    backoff_ms: u64,
    mut call: impl FnMut() -> Result<T, (ChatError, bool)>,
) -> Result<(T, u32), ChatError> {
    let mut attempt = 0u32;
    loop {
        match call() {
            Ok(v) => return Ok((v, attempt)),
            Err((e, false)) => return Err(e),
            Err((e, true)) => {
                if attempt >= max_retries {
                    return Err(ChatError::ExhaustedRetries { attempts: attempt + 1, last: e.to_string() });
                }
                let delay = backoff_ms.saturating_mul(1u64 << attempt.min(20));
                thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
        }
    }
}

/// Chat client for one model on an OpenAI-compatible server.
pub struct ChatClient {
    spec: ModelSpec,
    agent: ureq::Agent,
    cache: Option<ResponseCache>,
    mode: CacheMode,
    slots: Arc<Semaphore>,
    network_requests: AtomicU64,
}

impl ChatClient {
    pub fn new(spec: ModelSpec) -> Self {
        let slots = Arc::new(Semaphore::new(spec.limits.max_inflight));
        ChatClient {
            agent: agent(spec.limits.timeout_secs),
            spec,
            cache: None,
            mode: CacheMode::Off,
            slots,
            network_requests: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache, mode: CacheMode) -> Self {
        self.cache = Some(cache);
        self.mode = mode;
        self
    }

    /// Shares an in-flight limit with other clients (e.g. of the same endpoint).
    pub fn with_semaphore(mut self, slots: Arc<Semaphore>) -> Self {
        self.slots = slots;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// HTTP attempts made so far, retries included.
    pub fn network_requests(&self) -> u64 {
        self.network_requests.load(Ordering::SeqCst)
    }

    fn request_body(&self, messages: &[Message], params: &SamplingParams) -> Value {
        let msgs: Vec<Value> = messages.iter().map(|m| json!({"role": m.role.wire_name(), "content": m.content})).collect();
        json!({
            "model": self.spec.served_name(),
            "messages": msgs,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "top_k": params.top_k,
        })
    }
}

fn parse_completion(v: &Value) -> Result<(String, u64, u64), ChatError> {
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ChatError::Protocol("response lacks choices[0].message.content".into()))?;
    let usage = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok((text.to_string(), usage("prompt_tokens"), usage("completion_tokens")))
}

impl ChatBackend for ChatClient {
    fn model_id(&self) -> &str {
        &self.spec.id
    }

    fn chat(&self, messages: &[Message], params: &SamplingParams) -> Result<CompletionResult, ChatError> {
        let hash = request_hash(&self.spec.id, params, messages);
        if self.mode != CacheMode::Off {
            if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&hash)) {
                return Ok(hit);
            }
            if self.mode == CacheMode::Replay {
                return Err(ChatError::CacheMiss(hash));
            }
        }
        let url = join_url(&self.spec.endpoint, "chat/completions");
        let body = self.request_body(messages, params);
        let limits = &self.spec.limits;
        let ((value, latency), retries) = with_retries(limits.max_retries, limits.backoff_ms, || {
            let _slot = self.slots.acquire();
            self.network_requests.fetch_add(1, Ordering::SeqCst);
            let start = Instant::now();
            let v = post_json(&self.agent, &url, &body, limits.timeout_secs)?;
            Ok((v, start.elapsed().as_secs_f64().max(1e-6)))
        })?;
        let (text, prompt_tokens, completion_tokens) = parse_completion(&value)?;
        let result = CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            latency_s: latency,
            model_id: self.spec.id.clone(),
            request_hash: hash,
            retries,
            from_cache: false,
        };
        if self.mode == CacheMode::ReadWrite {
            if let Some(cache) = &self.cache {
                cache.put(&result).map_err(|e| ChatError::Transport(format!("cannot write cache: {e}")))?;
            }
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ThroughputError {
    #[error("no completions to measure")]
    EmptyInput,
    #[error("gpu_count must be at least 1")]
    NoGpus,
}

/// Processed tokens per second of generation time, per GPU.
pub fn throughput(results: &[CompletionResult], gpu_count: u32) -> Result<f64, ThroughputError> {
    if results.is_empty() {
        return Err(ThroughputError::EmptyInput);
    }
    if gpu_count == 0 {
        return Err(ThroughputError::NoGpus);
    }
    let tokens: u64 = results.iter().map(CompletionResult::total_tokens).sum();
    let seconds: f64 = results.iter().map(|r| r.latency_s).sum();
    Ok(tokens as f64 / seconds / f64::from(gpu_count))
}
