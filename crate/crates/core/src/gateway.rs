//! Text-generation backends and the caching gateway in front of them.
//!
//! Three pieces:
//! - [`ScriptedBackend`]: regex rules over the concatenated message text,
//!   first match wins. Deterministic stand-in for a model in tests and
//!   desk-scale runs.
//! - [`HttpBackend`]: OpenAI-compatible `/chat/completions` client with
//!   bounded retries and an optional token-bucket rate limit.
//! - [`Gateway`]: wraps any backend with an [`ExchangeCache`] keyed by a
//!   digest of `(backend descriptor, messages, decode config)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache entry {path} is not a valid exchange: {source}")]
    Decode {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::InvalidRequest("no messages".into()));
    }
    if let Some(m) = messages.iter().find(|m| m.content.trim().is_empty()) {
        return Err(BackendError::InvalidRequest(format!(
            "empty {:?} message content",
            m.role
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub top_p: f64,
    pub temperature: f64,
    pub top_k: u32,
    pub max_new_tokens: u32,
}

impl DecodeConfig {
    /// Deterministic decoding used for label prediction.
    pub fn greedy() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            top_p: 1.0,
            temperature: 0.0,
            top_k: 1,
            max_new_tokens: 256,
        }
    }

    /// Sampling used for explanation, guideline and merge generation:
    /// top_p 0.9, temperature 0.6, top_k 50.
    pub fn sampled() -> Self {
        Self {
            mode: DecodeMode::Sampled,
            top_p: 0.9,
            temperature: 0.6,
            top_k: 50,
            max_new_tokens: 512,
        }
    }

    pub fn with_max_new_tokens(mut self, n: u32) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.mode == DecodeMode::Sampled {
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(BackendError::InvalidRequest(format!("top_p {} not in (0,1]", self.top_p)));
            }
            if !(self.temperature >= 0.0) {
                return Err(BackendError::InvalidRequest("negative temperature".into()));
            }
            if self.top_k == 0 {
                return Err(BackendError::InvalidRequest("top_k must be positive".into()));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Greedy configs ignore the sampling knobs, so they are zeroed for keying.
    fn normalized(&self) -> Self {
        match self.mode {
            DecodeMode::Greedy => Self {
                top_p: 1.0,
                temperature: 0.0,
                top_k: 1,
                ..*self
            },
            DecodeMode::Sampled => *self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

pub trait Backend: Send + Sync {
    /// Identifies the model endpoint; part of every cache key.
    fn descriptor(&self) -> String;

    fn complete(&self, messages: &[ChatMessage], decode: &DecodeConfig) -> Result<Completion, BackendError>;
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRuleSpec {
    pub pattern: String,
    pub response: String,
}

/// On-disk form of a scripted backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSpec {
    #[serde(default = "default_script_name")]
    pub name: String,
    #[serde(default)]
    pub rules: Vec<ScriptRuleSpec>,
    pub default_response: String,
}

fn default_script_name() -> String {
    "script".into()
}

#[derive(Debug)]
struct ScriptRule {
    pattern: Regex,
    response: String,
}

/// Deterministic backend: the message contents are joined with `\n` and
/// matched against each rule in order. Responses may reference capture
/// groups (`$1`, `${name}`); a literal dollar is written `$$`.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    rules: Vec<ScriptRule>,
    default_response: String,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, default_response: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            rules: Vec::new(),
            default_response: default_response.into(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn rule(mut self, pattern: &str, response: impl Into<String>) -> Result<Self, regex::Error> {
        self.rules.push(ScriptRule {
            pattern: Regex::new(pattern)?,
            response: response.into(),
        });
        Ok(self)
    }

    pub fn from_spec(spec: &ScriptSpec) -> Result<Self, BackendError> {
        let mut backend = Self::new(spec.name.clone(), spec.default_response.clone());
        for r in &spec.rules {
            backend = backend
                .rule(&r.pattern, r.response.clone())
                .map_err(|e| BackendError::Config(format!("bad pattern `{}`: {e}", r.pattern)))?;
        }
        Ok(backend)
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let spec: ScriptSpec = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_spec(&spec)
    }

    /// Number of `complete` calls served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn respond(&self, text: &str) -> String {
        for rule in &self.rules {
            if let Some(caps) = rule.pattern.captures(text) {
                let mut out = String::new();
                caps.expand(&rule.response, &mut out);
                return out;
            }
        }
        self.default_response.clone()
    }
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> String {
        format!("scripted:{}", self.name)
    }

    fn complete(&self, messages: &[ChatMessage], _decode: &DecodeConfig) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let joined = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        Ok(Completion {
            text: self.respond(&joined),
            attempts: 1,
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before attempt `i + 2` is `backoff[min(i, len - 1)]`.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: vec![Duration::from_secs(1), Duration::from_secs(4)],
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            backoff: vec![Duration::ZERO],
        }
    }

    fn delay_before_retry(&self, failed_attempts: u32) -> Duration {
        if self.backoff.is_empty() {
            return Duration::ZERO;
        }
        let i = (failed_attempts.saturating_sub(1) as usize).min(self.backoff.len() - 1);
        self.backoff[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Requests per second; `None` disables limiting.
    #[serde(default)]
    pub rate_limit: Option<f64>,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug)]
struct TokenBucket {
    capacity: f64,
    tokens: f64,
    per_sec: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(per_sec: f64) -> Self {
        let capacity = per_sec.max(1.0);
        Self {
            capacity,
            tokens: capacity,
            per_sec,
            last: Instant::now(),
        }
    }

    /// Takes one token, returning how long the caller must wait first.
    fn take(&mut self) -> Duration {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.per_sec)
            .min(self.capacity);
        self.last = now;
        self.tokens -= 1.0;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.per_sec)
        }
    }
}

enum AttemptError {
    Retriable(String),
    Fatal(BackendError),
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: Option<Mutex<TokenBucket>>,
}

impl HttpBackend {
    /// Reads the API key from the configured env var; a missing key sends no
    /// `Authorization` header (local servers often need none).
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if config.base_url.trim().is_empty() || config.model.trim().is_empty() {
            return Err(BackendError::Config("base_url and model are required".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limiter = match config.rate_limit {
            Some(r) if r > 0.0 => Some(Mutex::new(TokenBucket::new(r))),
            Some(_) => return Err(BackendError::Config("rate_limit must be positive".into())),
            None => None,
        };
        Ok(Self {
            config,
            api_key,
            client,
            retry: RetryPolicy::default(),
            limiter,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, messages: &[ChatMessage], decode: &DecodeConfig) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": decode.max_new_tokens,
            "stream": false,
        });
        match decode.mode {
            DecodeMode::Greedy => {
                body["temperature"] = json!(0.0);
            }
            DecodeMode::Sampled => {
                body["temperature"] = json!(decode.temperature);
                body["top_p"] = json!(decode.top_p);
                body["top_k"] = json!(decode.top_k);
            }
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, AttemptError> {
        if let Some(limiter) = &self.limiter {
            let wait = limiter.lock().expect("rate limiter poisoned").take();
            if !wait.is_zero() {
                thread::sleep(wait);
            }
        }
        let mut req = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| AttemptError::Retriable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| AttemptError::Retriable(e.to_string()))?;
        match status {
            200..=299 => parse_chat_response(&text).map_err(AttemptError::Fatal),
            401 | 403 => Err(AttemptError::Fatal(BackendError::Auth { status })),
            408 | 429 | 500..=599 => Err(AttemptError::Retriable(format!("HTTP {status}"))),
            _ => Err(AttemptError::Fatal(BackendError::Rejected {
                status,
                body: text.chars().take(500).collect(),
            })),
        }
    }
}

/// Pulls `choices[0].message.content` out of a chat-completions body.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> String {
        format!("http:{}#{}", self.config.base_url.trim_end_matches('/'), self.config.model)
    }

    fn complete(&self, messages: &[ChatMessage], decode: &DecodeConfig) -> Result<Completion, BackendError> {
        let body = self.request_body(messages, decode);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(Completion { text, attempts }),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retriable(message)) => {
                    if attempts >= self.retry.max_attempts {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    warn!("{} attempt {attempts} failed: {message}", self.descriptor());
                    thread::sleep(self.retry.delay_before_retry(attempts));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exchange cache

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub backend: String,
    pub messages: Vec<ChatMessage>,
    pub decode: DecodeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub attempt: u32,
}

impl ExchangeRequest {
    /// Hex SHA-256 over the canonical JSON of the request.
    pub fn key(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("exchange request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendExchange {
    pub key: String,
    pub request: ExchangeRequest,
    pub response: String,
    pub timestamp: u64,
    pub attempt_count: u32,
}

#[derive(Debug)]
enum CacheStore {
    Memory(RwLock<HashMap<String, BackendExchange>>),
    Disk { dir: PathBuf, writer: Mutex<()> },
}

/// Exchange store: in memory, or one JSON file per key digest on disk.
#[derive(Debug)]
pub struct ExchangeCache {
    store: CacheStore,
}

impl ExchangeCache {
    pub fn memory() -> Self {
        Self {
            store: CacheStore::Memory(RwLock::new(HashMap::new())),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| CacheError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            store: CacheStore::Disk {
                dir,
                writer: Mutex::new(()),
            },
        })
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("{key}.json"))
    }

    pub fn load(&self, key: &str) -> Result<Option<BackendExchange>, CacheError> {
        match &self.store {
            CacheStore::Memory(map) => Ok(map.read().expect("cache poisoned").get(key).cloned()),
            CacheStore::Disk { dir, .. } => {
                let path = Self::path_for(dir, key);
                let raw = match fs::read(&path) {
                    Ok(raw) => raw,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
                    Err(source) => {
                        return Err(CacheError::Io {
                            path: path.display().to_string(),
                            source,
                        })
                    }
                };
                serde_json::from_slice(&raw)
                    .map(Some)
                    .map_err(|source| CacheError::Decode {
                        path: path.display().to_string(),
                        source,
                    })
            }
        }
    }

    pub fn store(&self, exchange: &BackendExchange) -> Result<(), CacheError> {
        match &self.store {
            CacheStore::Memory(map) => {
                map.write()
                    .expect("cache poisoned")
                    .insert(exchange.key.clone(), exchange.clone());
                Ok(())
            }
            CacheStore::Disk { dir, writer } => {
                let _guard = writer.lock().expect("cache writer poisoned");
                let path = Self::path_for(dir, &exchange.key);
                let tmp = path.with_extension("json.tmp");
                let io = |source, p: &Path| CacheError::Io {
                    path: p.display().to_string(),
                    source,
                };
                let bytes = serde_json::to_vec_pretty(exchange).expect("exchange serializes");
                fs::write(&tmp, bytes).map_err(|e| io(e, &tmp))?;
                fs::rename(&tmp, &path).map_err(|e| io(e, &path))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_errors: u64,
}

/// Backend plus cache policy.
///
/// Greedy calls are always cached. Sampled calls are cached only when a run
/// seed is set, and the seed is part of their key.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ExchangeCache>,
    run_seed: Option<u64>,
    backend_calls: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    errors: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            run_seed: None,
            backend_calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ExchangeCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_run_seed(mut self, seed: Option<u64>) -> Self {
        self.run_seed = seed;
        self
    }

    pub fn descriptor(&self) -> String {
        self.backend.descriptor()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
            cache_misses: self.misses.load(Ordering::Relaxed),
            cache_errors: self.errors.load(Ordering::Relaxed),
        }
    }

    /// Uncached call straight to the backend.
    pub fn complete(&self, messages: &[ChatMessage], decode: &DecodeConfig) -> Result<String, BackendError> {
        self.call_backend(messages, decode).map(|c| c.text)
    }

    fn call_backend(&self, messages: &[ChatMessage], decode: &DecodeConfig) -> Result<Completion, BackendError> {
        validate_messages(messages)?;
        decode.validate()?;
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        self.backend.complete(messages, decode)
    }

    pub fn cached_complete(&self, messages: &[ChatMessage], decode: &DecodeConfig) -> Result<String, BackendError> {
        self.cached_complete_nth(messages, decode, 0)
    }

    /// `attempt` distinguishes re-asks of the same request so that a bad
    /// cached answer is not replayed forever.
    pub fn cached_complete_nth(
        &self,
        messages: &[ChatMessage],
        decode: &DecodeConfig,
        attempt: u32,
    ) -> Result<String, BackendError> {
        let cacheable = match decode.mode {
            DecodeMode::Greedy => true,
            DecodeMode::Sampled => self.run_seed.is_some(),
        };
        let cache = match (&self.cache, cacheable) {
            (Some(cache), true) => cache,
            _ => return self.complete(messages, decode),
        };
        let request = ExchangeRequest {
            backend: self.backend.descriptor(),
            messages: messages.to_vec(),
            decode: decode.normalized(),
            seed: match decode.mode {
                DecodeMode::Greedy => None,
                DecodeMode::Sampled => self.run_seed,
            },
            attempt,
        };
        let key = request.key();
        match cache.load(&key) {
            Ok(Some(hit)) if hit.request == request => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit.response);
            }
            Ok(_) => {}
            Err(e) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
                warn!("cache read failed, calling backend: {e}");
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let completion = self.call_backend(messages, decode)?;
        let exchange = BackendExchange {
            key,
            request,
            response: completion.text,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            attempt_count: completion.attempts,
        };
        if let Err(e) = cache.store(&exchange) {
            self.errors.fetch_add(1, Ordering::Relaxed);
            warn!("cache write failed: {e}");
        }
        Ok(exchange.response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msgs(text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user(text)]
    }

    fn scripted() -> Arc<ScriptedBackend> {
        Arc::new(
            ScriptedBackend::new("t", "fallback")
                .rule(r"(?s)classify.*boredom", r#"{"label": "boredom"}"#)
                .unwrap()
                .rule(r"echo (\w+)", r#"{"label": "$1"}"#)
                .unwrap(),
        )
    }

    #[test]
    fn scripted_first_rule_wins() {
        let b = scripted();
        let out = b.complete(&msgs("classify this: boredom echo joy"), &DecodeConfig::greedy()).unwrap();
        assert_eq!(out.text, r#"{"label": "boredom"}"#);
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn scripted_default_and_captures() {
        let b = scripted();
        assert_eq!(b.complete(&msgs("nothing"), &DecodeConfig::greedy()).unwrap().text, "fallback");
        assert_eq!(
            b.complete(&msgs("echo joy"), &DecodeConfig::greedy()).unwrap().text,
            r#"{"label": "joy"}"#
        );
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn scripted_spec_round_trip() {
        let spec: ScriptSpec = serde_json::from_str(
            r#"{"name":"x","rules":[{"pattern":"a+","response":"A"}],"default_response":"D"}"#,
        )
        .unwrap();
        let b = ScriptedBackend::from_spec(&spec).unwrap();
        assert_eq!(b.respond("caab"), "A");
        assert_eq!(b.respond("zzz"), "D");
        assert_eq!(b.descriptor(), "scripted:x");
        let bad = ScriptSpec {
            name: "x".into(),
            rules: vec![ScriptRuleSpec {
                pattern: "(".into(),
                response: String::new(),
            }],
            default_response: String::new(),
        };
        assert!(ScriptedBackend::from_spec(&bad).is_err());
    }

    #[test]
    fn cached_complete_hits_after_first_call() {
        let backend = scripted();
        let gw = Gateway::new(backend.clone()).with_cache(ExchangeCache::memory());
        let m = msgs("classify boredom");
        let first = gw.cached_complete(&m, &DecodeConfig::greedy()).unwrap();
        let second = gw.cached_complete(&m, &DecodeConfig::greedy()).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.calls(), 1);
        let stats = gw.stats();
        assert_eq!((stats.cache_hits, stats.cache_misses), (1, 1));
    }

    #[test]
    fn decode_mode_is_part_of_key() {
        let backend = scripted();
        let gw = Gateway::new(backend.clone())
            .with_cache(ExchangeCache::memory())
            .with_run_seed(Some(7));
        let m = msgs("classify boredom");
        gw.cached_complete(&m, &DecodeConfig::greedy()).unwrap();
        gw.cached_complete(&m, &DecodeConfig::sampled()).unwrap();
        assert_eq!(backend.calls(), 2);
        gw.cached_complete(&m, &DecodeConfig::sampled()).unwrap();
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn sampled_calls_uncached_without_seed() {
        let backend = scripted();
        let gw = Gateway::new(backend.clone()).with_cache(ExchangeCache::memory());
        let m = msgs("x");
        gw.cached_complete(&m, &DecodeConfig::sampled()).unwrap();
        gw.cached_complete(&m, &DecodeConfig::sampled()).unwrap();
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn greedy_key_ignores_sampling_knobs() {
        let mut a = DecodeConfig::greedy();
        a.top_p = 0.3;
        let req = |d: DecodeConfig| ExchangeRequest {
            backend: "b".into(),
            messages: msgs("x"),
            decode: d.normalized(),
            seed: None,
            attempt: 0,
        };
        assert_eq!(req(a).key(), req(DecodeConfig::greedy()).key());
    }

    #[test]
    fn disk_cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ExchangeCache::on_disk(dir.path()).unwrap();
        let request = ExchangeRequest {
            backend: "b".into(),
            messages: msgs("héllo \"quoted\"\n"),
            decode: DecodeConfig::sampled(),
            seed: Some(3),
            attempt: 1,
        };
        let ex = BackendExchange {
            key: request.key(),
            request,
            response: "résumé {\"a\":1}\t".into(),
            timestamp: 5,
            attempt_count: 2,
        };
        cache.store(&ex).unwrap();
        assert_eq!(cache.load(&ex.key).unwrap(), Some(ex.clone()));
        assert_eq!(cache.load("missing").unwrap(), None);
    }

    #[test]
    fn corrupt_cache_entry_degrades_to_backend_call() {
        let dir = tempfile::tempdir().unwrap();
        let backend = scripted();
        let gw = Gateway::new(backend.clone()).with_cache(ExchangeCache::on_disk(dir.path()).unwrap());
        let m = msgs("echo joy");
        gw.cached_complete(&m, &DecodeConfig::greedy()).unwrap();
        for entry in fs::read_dir(dir.path()).unwrap() {
            fs::write(entry.unwrap().path(), b"{not json").unwrap();
        }
        let out = gw.cached_complete(&m, &DecodeConfig::greedy()).unwrap();
        assert_eq!(out, r#"{"label": "joy"}"#);
        assert_eq!(backend.calls(), 2);
        assert!(gw.stats().cache_errors >= 1);
    }

    #[test]
    fn empty_message_rejected() {
        let gw = Gateway::new(scripted());
        let err = gw.complete(&[ChatMessage::user("  ")], &DecodeConfig::greedy()).unwrap_err();
        assert!(matches!(err, BackendError::InvalidRequest(_)));
    }

    #[test]
    fn retry_delays_follow_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before_retry(1), Duration::from_secs(1));
        assert_eq!(p.delay_before_retry(2), Duration::from_secs(4));
        assert_eq!(p.delay_before_retry(5), Duration::from_secs(4));
    }

    #[test]
    fn parse_chat_response_shapes() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_chat_response(ok).unwrap(), "hi");
        assert!(matches!(
            parse_chat_response(r#"{"choices":[]}"#),
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(parse_chat_response("<html>").is_err());
    }

    #[test]
    fn token_bucket_throttles_after_burst() {
        let mut bucket = TokenBucket::new(2.0);
        assert!(bucket.take().is_zero());
        assert!(bucket.take().is_zero());
        assert!(!bucket.take().is_zero());
    }
}
