//! Scripted stand-in for an OpenAI-compatible server.
//!
//! A script is a list of rules. Each chat request is answered by the first
//! rule whose conditions all hold; conditions look at the last human message
//! (`contains`, `hash`), the whole conversation (`transcript_contains`), the
//! requested `model` and `temperature`. A rule may first emit a sequence of
//! HTTP failure statuses, and may cycle through several responses. Requests no
//! rule matches get HTTP 400. `/embeddings` is answered with the hashed n-gram
//! embedder, so similarity values are reproducible.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use clinex_core::chat::sha256_hex;
use clinex_core::embedding::{Embedder, HashedNgramEmbedder};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind mock server: {0}")]
    Bind(String),
    #[error("invalid script: {0}")]
    Script(String),
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    /// Substrings that must all occur in the last human message.
    #[serde(default, deserialize_with = "one_or_many", skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Substrings that must all occur somewhere in the conversation.
    #[serde(default, deserialize_with = "one_or_many", skip_serializing_if = "Vec::is_empty")]
    pub transcript_contains: Vec<String>,
    /// sha256 (hex) of the last human message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Returned in turn on successive matches; the last one repeats.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    /// HTTP statuses emitted on the first matches, before any response.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<u16>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl Rule {
    pub fn reply(contains: impl Into<String>, response: impl Into<String>) -> Self {
        Rule { contains: vec![contains.into()], response: Some(response.into()), ..Rule::default() }
    }

    fn answers(&self) -> Vec<&str> {
        self.response.iter().chain(&self.responses).map(String::as_str).collect()
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        let last = req.last_human.as_deref().unwrap_or("");
        self.contains.iter().all(|s| last.contains(s.as_str()))
            && self.transcript_contains.iter().all(|s| req.transcript.contains(s.as_str()))
            && self.hash.as_ref().is_none_or(|h| *h == sha256_hex(last.as_bytes()))
            && self.model.as_ref().is_none_or(|m| Some(m) == req.model.as_ref())
            && self.temperature.is_none_or(|t| req.temperature.is_some_and(|rt| (rt - t).abs() < 1e-9))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

impl Script {
    pub fn new(rules: Vec<Rule>) -> Self {
        Script { rules, embedding_dim: None }
    }

    pub fn parse(text: &str) -> Result<Self, MockError> {
        let script: Script = serde_yaml::from_str(text).map_err(|e| MockError::Script(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MockError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), MockError> {
        for (i, r) in self.rules.iter().enumerate() {
            if r.answers().is_empty() {
                return Err(MockError::Script(format!("rules[{i}] has neither `response` nor `responses`")));
            }
        }
        Ok(())
    }
}

struct ChatRequest {
    model: Option<String>,
    temperature: Option<f64>,
    last_human: Option<String>,
    transcript: String,
    word_count: u64,
}

impl ChatRequest {
    fn from_body(body: &Value) -> Option<Self> {
        let messages = body.get("messages")?.as_array()?;
        let mut last_human = None;
        let mut transcript = String::new();
        let mut word_count = 0;
        for m in messages {
            let content = m.get("content").and_then(Value::as_str).unwrap_or("");
            if m.get("role").and_then(Value::as_str) == Some("user") {
                last_human = Some(content.to_string());
            }
            transcript.push_str(content);
            transcript.push('\n');
            word_count += content.split_whitespace().count() as u64;
        }
        Some(ChatRequest {
            model: body.get("model").and_then(Value::as_str).map(String::from),
            temperature: body.get("temperature").and_then(Value::as_f64),
            last_human,
            transcript,
            word_count,
        })
    }
}

/// One request as the server saw it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoggedRequest {
    pub seq: usize,
    pub path: String,
    pub status: u16,
    pub rule: Option<usize>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub last_human: Option<String>,
    pub body: Value,
}

struct State {
    script: Script,
    /// Per rule: (successful answers, failures emitted).
    counters: Mutex<Vec<(usize, usize)>>,
    log: Mutex<Vec<LoggedRequest>>,
    inflight: AtomicUsize,
    peak: AtomicUsize,
    embedder: HashedNgramEmbedder,
}

struct Reply {
    status: u16,
    body: Value,
    delay_ms: u64,
}

impl State {
    fn record(&self, path: &str, body: Value, status: u16, rule: Option<usize>, req: Option<&ChatRequest>) {
        let mut log = self.log.lock().expect("request log poisoned");
        let seq = log.len();
        log.push(LoggedRequest {
            seq,
            path: path.to_string(),
            status,
            rule,
            model: req.and_then(|r| r.model.clone()),
            temperature: req.and_then(|r| r.temperature),
            last_human: req.and_then(|r| r.last_human.clone()),
            body,
        });
    }

    fn chat(&self, path: &str, body: Value) -> Reply {
        let Some(req) = ChatRequest::from_body(&body) else {
            self.record(path, body, 400, None, None);
            return Reply { status: 400, body: json!({"error": "request body lacks `messages`"}), delay_ms: 0 };
        };
        // Counter update and logging happen under one lock so log order is match order.
        let mut counters = self.counters.lock().expect("rule counters poisoned");
        let Some(idx) = self.script.rules.iter().position(|r| r.matches(&req)) else {
            let preview: String = req.last_human.as_deref().unwrap_or("").chars().take(200).collect();
            self.record(path, body, 400, None, Some(&req));
            return Reply {
                status: 400,
                body: json!({"error": format!("no script rule matches the last human message: {preview:?}")}),
                delay_ms: 0,
            };
        };
        let rule = &self.script.rules[idx];
        let (answered, failed) = &mut counters[idx];
        if *failed < rule.failures.len() {
            let status = rule.failures[*failed];
            *failed += 1;
            self.record(path, body, status, Some(idx), Some(&req));
            return Reply { status, body: json!({"error": "scripted failure"}), delay_ms: rule.latency_ms };
        }
        let answers = rule.answers();
        let text = answers[(*answered).min(answers.len() - 1)].to_string();
        *answered += 1;
        let seq = self.log.lock().expect("request log poisoned").len();
        self.record(path, body, 200, Some(idx), Some(&req));
        drop(counters);
        let prompt_tokens = rule.prompt_tokens.unwrap_or(req.word_count);
        let completion_tokens = rule.completion_tokens.unwrap_or(text.split_whitespace().count() as u64);
        Reply {
            status: 200,
            body: json!({
                "id": format!("mock-{seq}"),
                "object": "chat.completion",
                "model": req.model,
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                "usage": {
                    "prompt_tokens": prompt_tokens,
                    "completion_tokens": completion_tokens,
                    "total_tokens": prompt_tokens + completion_tokens,
                },
            }),
            delay_ms: rule.latency_ms,
        }
    }

    fn embeddings(&self, path: &str, body: Value) -> Reply {
        let inputs: Option<Vec<String>> = match body.get("input") {
            Some(Value::String(s)) => Some(vec![s.clone()]),
            Some(Value::Array(items)) => items.iter().map(|v| v.as_str().map(String::from)).collect(),
            _ => None,
        };
        let refs: Vec<&str> = inputs.iter().flatten().map(String::as_str).collect();
        let result = match &inputs {
            None => Err("`input` must be a string or a list of strings".to_string()),
            Some(_) => self.embedder.embed(&refs).map_err(|e| e.to_string()),
        };
        match result {
            Ok(vectors) => {
                self.record(path, body, 200, None, None);
                let data: Vec<Value> = vectors
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| json!({"object": "embedding", "index": i, "embedding": v}))
                    .collect();
                let tokens: usize = refs.iter().map(|t| t.split_whitespace().count()).sum();
                Reply {
                    status: 200,
                    body: json!({"object": "list", "data": data, "usage": {"prompt_tokens": tokens, "total_tokens": tokens}}),
                    delay_ms: 0,
                }
            }
            Err(msg) => {
                self.record(path, body, 400, None, None);
                Reply { status: 400, body: json!({"error": msg}), delay_ms: 0 }
            }
        }
    }

    fn handle(&self, mut request: tiny_http::Request) {
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let path = request.url().split('?').next().unwrap_or("").to_string();
        let mut raw = String::new();
        let reply = match request.as_reader().read_to_string(&mut raw) {
            Err(e) => Reply { status: 400, body: json!({"error": format!("unreadable body: {e}")}), delay_ms: 0 },
            Ok(_) => match serde_json::from_str::<Value>(&raw) {
                Err(e) => {
                    self.record(&path, Value::String(raw.clone()), 400, None, None);
                    Reply { status: 400, body: json!({"error": format!("invalid JSON: {e}")}), delay_ms: 0 }
                }
                Ok(body) if path.ends_with("/chat/completions") => self.chat(&path, body),
                Ok(body) if path.ends_with("/embeddings") => self.embeddings(&path, body),
                Ok(body) => {
                    self.record(&path, body, 404, None, None);
                    Reply { status: 404, body: json!({"error": format!("unknown path {path}")}), delay_ms: 0 }
                }
            },
        };
        if reply.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(reply.delay_ms));
        }
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
        let response = tiny_http::Response::from_string(reply.body.to_string())
            .with_status_code(reply.status)
            .with_header(header);
        // The client may have given up already (timeouts); nothing to do then.
        let _ = request.respond(response);
        self.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

const WORKERS: usize = 32;

/// A running mock server on the loopback interface. Stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts serving.
    pub fn start(script: Script, port: u16) -> Result<Self, MockError> {
        script.validate()?;
        let server = tiny_http::Server::http(("127.0.0.1", port)).map_err(|e| MockError::Bind(e.to_string()))?;
        let addr = server.server_addr().to_ip().ok_or_else(|| MockError::Bind("not an IP socket".into()))?;
        let server = Arc::new(server);
        let dim = script.embedding_dim.unwrap_or(clinex_core::embedding::DEFAULT_DIM);
        let state = Arc::new(State {
            counters: Mutex::new(vec![(0, 0); script.rules.len()]),
            script,
            log: Mutex::new(Vec::new()),
            inflight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            embedder: HashedNgramEmbedder::with_dim(dim),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..WORKERS)
            .map(|_| {
                let (server, state, stop) = (server.clone(), state.clone(), stop.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => state.handle(req),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(MockServer { addr, state, stop, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to use as a model endpoint, e.g. `http://127.0.0.1:PORT/v1`.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.state.log.lock().expect("request log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.log.lock().expect("request log poisoned").len()
    }

    pub fn chat_request_count(&self) -> usize {
        self.requests().iter().filter(|r| r.path.ends_with("/chat/completions")).count()
    }

    /// Largest number of requests handled at the same time.
    pub fn peak_concurrency(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }

    pub fn clear_log(&self) {
        self.state.log.lock().expect("request log poisoned").clear();
        self.state.peak.store(0, Ordering::SeqCst);
    }

    /// Blocks until the process is terminated.
    pub fn serve_forever(self) -> ! {
        loop {
            std::thread::park();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
