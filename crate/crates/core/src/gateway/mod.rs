//! Single point of contact with chat-completion endpoints.
//!
//! The gateway owns request construction, bounded-parallel dispatch, retry
//! with exponential backoff, a content-addressed response cache, per-run
//! budgets, and structured-output parsing with a repair loop. Backends are
//! pluggable: an OpenAI-compatible HTTP backend for real runs and a
//! deterministic mock for offline tests.

mod cache;
mod http;
mod mock;
pub mod schemas;

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::FileCache;
pub use http::{ApiKey, HttpBackend};
pub use mock::{MockBackend, MockMatcher, MockReply};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            image_refs: vec![],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            image_refs: vec![],
        }
    }

    pub fn user_with_images(text: impl Into<String>, image_refs: Vec<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            image_refs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Names the expected output schema for structured calls; empty for
    /// free-form calls.
    pub schema_tag: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub cached: bool,
}

/// 256-bit request digest rendered as a hex string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey(pub String);

/// Digest over (model_id, messages, temperature, schema_tag). Image refs
/// participate through their file content hash when the ref resolves to a
/// readable file, otherwise through the ref string itself.
pub fn cache_key(request: &ChatRequest) -> CacheKey {
    fn put(h: &mut Sha256, bytes: &[u8]) {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let mut h = Sha256::new();
    put(&mut h, request.model_id.as_bytes());
    h.update(request.temperature.to_bits().to_le_bytes());
    put(&mut h, request.schema_tag.as_bytes());
    h.update((request.messages.len() as u64).to_le_bytes());
    for m in &request.messages {
        h.update([match m.role {
            Role::System => 0u8,
            Role::User => 1u8,
        }]);
        put(&mut h, m.text.as_bytes());
        h.update((m.image_refs.len() as u64).to_le_bytes());
        for r in &m.image_refs {
            match std::fs::read(r) {
                Ok(bytes) => {
                    h.update([1u8]);
                    h.update(Sha256::digest(&bytes));
                }
                Err(_) => {
                    h.update([0u8]);
                    put(&mut h, r.as_bytes());
                }
            }
        }
    }
    CacheKey(hex::encode(h.finalize()))
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("endpoint error {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("unparsable structured output after {attempts} attempts: {last_error}")]
    UnparsableOutput { attempts: u32, last_error: String },
    #[error("unknown schema tag '{0}'")]
    UnknownSchemaTag(String),
}

/// Raw reply from a backend, before caching and accounting.
#[derive(Debug, Clone)]
pub struct BackendReply {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("timeout")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        match self {
            BackendError::Http { status, .. } => *status == 429 || (500..=599).contains(status),
            BackendError::Timeout | BackendError::Transport(_) => true,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Retries after the first attempt, for transient failures only.
    pub retries: u32,
    pub backoff_base_ms: u64,
    /// Upper bound on in-flight backend calls.
    pub max_concurrency: usize,
    pub cache_dir: Option<std::path::PathBuf>,
    /// Hard per-run ceiling on dispatched requests (cache hits are free).
    pub max_requests: Option<u64>,
    /// Hard per-run ceiling on accumulated output tokens.
    pub max_output_tokens: Option<u64>,
    /// Structured-output repair attempts including the first.
    pub repair_attempts: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff_base_ms: 250,
            max_concurrency: 4,
            cache_dir: None,
            max_requests: None,
            max_output_tokens: None,
            repair_attempts: 3,
        }
    }
}

#[derive(Default)]
struct Spent {
    requests: u64,
    output_tokens: u64,
}

struct Semaphore {
    in_use: Mutex<usize>,
    released: Condvar,
    max: usize,
}

impl Semaphore {
    fn new(max: usize) -> Self {
        Self {
            in_use: Mutex::new(0),
            released: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut in_use = self.in_use.lock().expect("semaphore poisoned");
        while *in_use >= self.max {
            in_use = self.released.wait(in_use).expect("semaphore poisoned");
        }
        *in_use += 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut in_use = self.sem.in_use.lock().expect("semaphore poisoned");
        *in_use -= 1;
        self.sem.released.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    cache: Option<FileCache>,
    permits: Semaphore,
    spent: Mutex<Spent>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        let cache = config.cache_dir.clone().map(FileCache::new);
        let permits = Semaphore::new(config.max_concurrency);
        Self {
            backend,
            config,
            cache,
            permits,
            spent: Mutex::new(Spent::default()),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Requests dispatched to the backend so far (cache hits excluded).
    pub fn requests_spent(&self) -> u64 {
        self.spent.lock().expect("spent poisoned").requests
    }

    pub fn output_tokens_spent(&self) -> u64 {
        self.spent.lock().expect("spent poisoned").output_tokens
    }

    /// Send one request. Cache hits return immediately with `cached: true`
    /// and byte-identical text; misses dispatch under the concurrency bound,
    /// retrying transient failures with exponential backoff.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = cache_key(request);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key) {
                return Ok(ChatResponse {
                    text: entry.text,
                    usage: entry.usage,
                    cached: true,
                });
            }
        }
        self.reserve_request()?;
        let reply = {
            let _permit = self.permits.acquire();
            self.send_with_retry(request)?
        };
        self.record_usage(reply.usage);
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&key, request, &reply) {
                log::warn!("cache write failed for {}: {e}", key.0);
            }
        }
        Ok(ChatResponse {
            text: reply.text,
            usage: reply.usage,
            cached: false,
        })
    }

    /// Structured call: run the repair pipeline (strip code fences, extract
    /// the first balanced JSON value, validate against the request's schema
    /// tag) and on validation failure re-prompt with the validation error
    /// appended, up to the configured attempt count.
    pub fn complete_structured(
        &self,
        request: &ChatRequest,
    ) -> Result<serde_json::Value, GatewayError> {
        if !schemas::is_registered(&request.schema_tag) {
            return Err(GatewayError::UnknownSchemaTag(request.schema_tag.clone()));
        }
        let attempts = self.config.repair_attempts.max(1);
        let mut req = request.clone();
        let mut last_error = String::new();
        for _ in 0..attempts {
            let response = self.complete(&req)?;
            match parse_structured(&response.text, &request.schema_tag) {
                Ok(value) => return Ok(value),
                Err(err) => {
                    last_error = err;
                    req.messages.push(Message::user(format!(
                        "Your previous reply could not be used: {last_error}\n\
                         Previous reply (verbatim):\n{}\n\
                         Reply again with ONLY a single raw JSON value that satisfies the \
                         requirements. No code fences, no commentary.",
                        truncate_chars(&response.text, 2000),
                    )));
                }
            }
        }
        Err(GatewayError::UnparsableOutput {
            attempts,
            last_error,
        })
    }
}

impl Gateway {
    fn reserve_request(&self) -> Result<(), GatewayError> {
        let mut spent = self.spent.lock().expect("spent poisoned");
        if let Some(max) = self.config.max_requests {
            if spent.requests >= max {
                return Err(GatewayError::BudgetExceeded(format!(
                    "request ceiling {max} reached"
                )));
            }
        }
        if let Some(max) = self.config.max_output_tokens {
            if spent.output_tokens >= max {
                return Err(GatewayError::BudgetExceeded(format!(
                    "output token ceiling {max} reached ({} spent)",
                    spent.output_tokens
                )));
            }
        }
        spent.requests += 1;
        Ok(())
    }

    fn record_usage(&self, usage: Usage) {
        let mut spent = self.spent.lock().expect("spent poisoned");
        spent.output_tokens += usage.output_tokens;
    }

    fn send_with_retry(&self, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.backend.send(request) {
                Ok(reply) => return Ok(reply),
                Err(err) if err.is_transient() && attempt < self.config.retries => {
                    attempt += 1;
                    let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                    if delay > 0 {
                        std::thread::sleep(std::time::Duration::from_millis(delay));
                    }
                }
                Err(BackendError::Timeout) => return Err(GatewayError::Timeout),
                Err(BackendError::Http { status, body }) => {
                    return Err(GatewayError::Endpoint { status, body })
                }
                Err(BackendError::Transport(detail)) => {
                    return Err(GatewayError::Endpoint {
                        status: 0,
                        body: detail,
                    })
                }
            }
        }
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let cut: String = s.chars().take(max).collect();
        format!("{cut}…")
    }
}

/// Strip markdown code fences. When the text contains a fenced block, the
/// content of the first block wins; otherwise the text passes through.
pub fn strip_code_fences(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let after_open = &text[open + 3..];
    // Skip an optional language tag on the fence line.
    let body_start = after_open.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after_open[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Extract the first balanced JSON object or array embedded in free text.
pub fn extract_first_json(text: &str) -> Result<&str, String> {
    let bytes = text.as_bytes();
    let start = text
        .find(|c| c == '{' || c == '[')
        .ok_or_else(|| "no JSON value found in output".to_string())?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Ok(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    Err("unbalanced JSON value in output".to_string())
}

/// Full repair-pipeline parse: fences, balanced extraction, JSON parse,
/// schema validation.
pub fn parse_structured(text: &str, schema_tag: &str) -> Result<serde_json::Value, String> {
    let stripped = strip_code_fences(text);
    let candidate = extract_first_json(stripped)?;
    let value: serde_json::Value =
        serde_json::from_str(candidate).map_err(|e| format!("invalid JSON: {e}"))?;
    schemas::validate(schema_tag, &value)?;
    Ok(value)
}
