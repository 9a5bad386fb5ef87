//! Chat-completion gateway.
//!
//! Every model call goes through [`Gateway::complete`], which consults a
//! content-addressed response cache before touching a [`Backend`]. Two
//! backends ship: [`HttpBackend`] speaks the OpenAI-compatible
//! `/chat/completions` wire format, [`MockBackend`] answers from a JSON
//! script so whole pipelines run deterministically offline.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{rouge_l, TokenSeq};
use crate::par::Exec;

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_SELF_CONSISTENCY_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s){}: {message}", .status.map(|s| format!(" (last status {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },
    #[error("mock script has no response for request digest {digest}")]
    ScriptedGap { digest: String },
    #[error("mock script: {0}")]
    Script(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error("self-consistency draw {failed_index} of {runs} failed ({completed} completed): {source}")]
    SelfConsistency {
        runs: usize,
        completed: usize,
        failed_index: usize,
        #[source]
        source: Box<GatewayError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Distinguishes self-consistency draws of the same prompt.
    pub sample_index: u32,
}

impl ChatRequest {
    /// Single user turn at the default temperature.
    pub fn user(model: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage::user(content)],
            temperature: DEFAULT_TEMPERATURE,
            sample_index: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty model name".into()));
        }
        Ok(())
    }

    /// The concatenated message text, used by mock fallback rules.
    fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
}

fn default_max_retries() -> u32 {
    4
}

fn default_backoff_base_ms() -> u64 {
    500
}

fn default_max_parallel() -> usize {
    4
}

impl BackendConfig {
    pub fn mock(script_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            api_key_env: None,
            script_path: Some(script_path.into()),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            max_parallel: default_max_parallel(),
        }
    }

    pub fn http(base_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            api_key_env: Some(api_key_env.into()),
            script_path: None,
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            max_parallel: default_max_parallel(),
        }
    }

    /// Checks the per-kind required fields. Error messages name the key.
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            BackendKind::Http => {
                if self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err(GatewayError::Config("backend.base_url is required for http".into()));
                }
                if self.api_key_env.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err(GatewayError::Config("backend.api_key_env is required for http".into()));
                }
            }
            BackendKind::Mock => {
                if self.script_path.is_none() {
                    return Err(GatewayError::Config("backend.script_path is required for mock".into()));
                }
            }
        }
        if self.max_parallel == 0 {
            return Err(GatewayError::Config("backend.max_parallel must be at least 1".into()));
        }
        Ok(())
    }

    /// Builds the configured backend. Relative script paths resolve
    /// against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn Backend>, GatewayError> {
        self.validate()?;
        match self.kind {
            BackendKind::Mock => {
                let path = base_dir.join(self.script_path.as_ref().expect("validated"));
                Ok(Arc::new(MockBackend::load(&path)?))
            }
            BackendKind::Http => {
                let env = self.api_key_env.as_deref().expect("validated");
                let key = std::env::var(env).map_err(|_| GatewayError::MissingApiKey(env.to_string()))?;
                let policy = RetryPolicy {
                    max_retries: self.max_retries,
                    backoff_base: Duration::from_millis(self.backoff_base_ms),
                };
                Ok(Arc::new(HttpBackend::new(
                    self.base_url.clone().expect("validated"),
                    key,
                    UreqTransport::new(),
                    policy,
                    self.max_parallel,
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Mentee,
    Critic,
}

/// A model bound to its job in the loop: the mentee writes summaries, the
/// critic produces gradients and prompt updates. Both may be the same model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRole {
    pub role: RoleKind,
    pub model: String,
}

impl LlmRole {
    pub fn mentee(model: impl Into<String>) -> Self {
        Self {
            role: RoleKind::Mentee,
            model: model.into(),
        }
    }

    pub fn critic(model: impl Into<String>) -> Self {
        Self {
            role: RoleKind::Critic,
            model: model.into(),
        }
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: BackendKind,
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: String,
    sample_index: u32,
}

/// SHA-256 (hex) over a canonical JSON rendering of the request and backend
/// kind. The temperature enters via its shortest round-trip decimal form, so
/// the key is identical across processes and platforms.
pub fn cache_key(request: &ChatRequest, backend: BackendKind) -> String {
    let material = KeyMaterial {
        backend,
        model: &request.model,
        messages: &request.messages,
        temperature: format!("{:?}", request.temperature),
        sample_index: request.sample_index,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Something that turns a chat request into reply text.
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest, digest: &str) -> Result<String, GatewayError>;
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum Needles {
    One(String),
    Many(Vec<String>),
}

impl Default for Needles {
    fn default() -> Self {
        Needles::Many(Vec::new())
    }
}

impl Needles {
    fn all_in(&self, haystack: &str) -> bool {
        match self {
            Needles::One(s) => haystack.contains(s.as_str()),
            Needles::Many(v) => v.iter().all(|s| haystack.contains(s.as_str())),
        }
    }
}

/// Ordered fallback entry. The first rule whose `model` (if given) matches
/// and whose `contains` substrings all occur in the request transcript wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackRule {
    #[serde(default)]
    contains: Needles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    reply: String,
}

/// Mock script file: exact replies by request digest, then fallback rules.
///
/// Replies may use `{{sample_index}}` and `{{digest8}}` (first eight hex
/// digits of the request digest); both are deterministic per request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: HashMap<String, String>,
    #[serde(default)]
    pub fallback: Vec<FallbackRule>,
}

impl MockScript {
    pub fn with_response(mut self, digest: impl Into<String>, reply: impl Into<String>) -> Self {
        self.responses.insert(digest.into(), reply.into());
        self
    }

    pub fn with_rule(mut self, contains: &[&str], reply: impl Into<String>) -> Self {
        self.fallback.push(FallbackRule {
            contains: Needles::Many(contains.iter().map(|s| s.to_string()).collect()),
            model: None,
            reply: reply.into(),
        });
        self
    }

    pub fn with_model_rule(mut self, model: &str, contains: &[&str], reply: impl Into<String>) -> Self {
        self.fallback.push(FallbackRule {
            contains: Needles::Many(contains.iter().map(|s| s.to_string()).collect()),
            model: Some(model.to_string()),
            reply: reply.into(),
        });
        self
    }
}

/// Deterministic scripted backend. Stateless per request, so concurrent use
/// gives the same answers as sequential use.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicU64::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript =
            serde_json::from_str(&text).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, request: &ChatRequest, digest: &str) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let template = match self.script.responses.get(digest) {
            Some(r) => r,
            None => {
                let transcript = request.transcript();
                self.script
                    .fallback
                    .iter()
                    .find(|rule| {
                        rule.model.as_deref().is_none_or(|m| m == request.model) && rule.contains.all_in(&transcript)
                    })
                    .map(|rule| &rule.reply)
                    .ok_or_else(|| GatewayError::ScriptedGap {
                        digest: digest.to_string(),
                    })?
            }
        };
        Ok(template
            .replace("{{sample_index}}", &request.sample_index.to_string())
            .replace("{{digest8}}", &digest[..8.min(digest.len())]))
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. Connection-level failures are `Err`; any HTTP
/// status, including errors, is `Ok`.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, String> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: default_max_retries(),
            backoff_base: Duration::from_millis(default_backoff_base_ms()),
        }
    }
}

impl RetryPolicy {
    pub fn is_retryable(status: u16) -> bool {
        status == 408 || status == 429 || status >= 500
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
    }
}

/// Counting semaphore bounding concurrent HTTP calls.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut p = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *p += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

/// OpenAI-compatible backend: `POST {base_url}/chat/completions`.
pub struct HttpBackend<T: HttpTransport> {
    endpoint: String,
    api_key: String,
    transport: T,
    policy: RetryPolicy,
    gate: Semaphore,
    sleeper: Sleeper,
    attempts: AtomicU64,
    retries: AtomicU64,
    in_flight: AtomicUsize,
}

impl<T: HttpTransport> HttpBackend<T> {
    pub fn new(base_url: String, api_key: String, transport: T, policy: RetryPolicy, max_parallel: usize) -> Self {
        Self {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            transport,
            policy,
            gate: Semaphore::new(max_parallel.max(1)),
            sleeper: Box::new(std::thread::sleep),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
        }
    }

    /// Replaces the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Box::new(sleeper);
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    fn post_once(&self, body: &str) -> Result<HttpReply, String> {
        let _permit = self.gate.acquire();
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let out = self.transport.post_json(&self.endpoint, &self.api_key, body);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

impl<T: HttpTransport> Backend for HttpBackend<T> {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn complete(&self, request: &ChatRequest, _digest: &str) -> Result<String, GatewayError> {
        let body = serde_json::to_string(&WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
        })
        .expect("wire request serializes");

        let mut attempt: u32 = 0;
        loop {
            let (status, message) = match self.post_once(&body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    if attempt > 0 {
                        log::info!("{} succeeded after {attempt} retr{}", self.endpoint, if attempt == 1 { "y" } else { "ies" });
                    }
                    return parse_wire_response(&reply.body).map_err(|message| GatewayError::Transport {
                        status: Some(reply.status),
                        attempts: attempt + 1,
                        message,
                    });
                }
                Ok(reply) => {
                    if !RetryPolicy::is_retryable(reply.status) {
                        return Err(GatewayError::Transport {
                            status: Some(reply.status),
                            attempts: attempt + 1,
                            message: truncate(&reply.body, 300),
                        });
                    }
                    (Some(reply.status), truncate(&reply.body, 300))
                }
                Err(e) => (None, e),
            };
            if attempt >= self.policy.max_retries {
                return Err(GatewayError::Transport {
                    status,
                    attempts: attempt + 1,
                    message,
                });
            }
            let delay = self.policy.delay(attempt);
            log::warn!(
                "{}: attempt {} failed ({}), retrying in {:?}",
                self.endpoint,
                attempt + 1,
                status.map_or_else(|| message.clone(), |s| format!("status {s}")),
                delay
            );
            self.retries.fetch_add(1, Ordering::SeqCst);
            (self.sleeper)(delay);
            attempt += 1;
        }
    }
}

fn parse_wire_response(body: &str) -> Result<String, String> {
    let parsed: WireResponse = serde_json::from_str(body).map_err(|e| format!("malformed completion body: {e}"))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| "completion has no message content".to_string())
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub backend_id: String,
    pub model: String,
    pub content: String,
}

/// Response store keyed by request digest. On disk each entry is
/// `<dir>/<digest>.json`, written atomically.
pub enum ResponseCache {
    Dir(PathBuf),
    Memory(Mutex<HashMap<String, CacheEntry>>),
}

impl ResponseCache {
    pub fn dir(path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        Ok(ResponseCache::Dir(path))
    }

    pub fn memory() -> Self {
        ResponseCache::Memory(Mutex::new(HashMap::new()))
    }

    pub fn get(&self, digest: &str) -> Result<Option<CacheEntry>, GatewayError> {
        match self {
            ResponseCache::Memory(m) => Ok(m.lock().unwrap_or_else(|e| e.into_inner()).get(digest).cloned()),
            ResponseCache::Dir(dir) => {
                let path = dir.join(format!("{digest}.json"));
                match fs::read(&path) {
                    Ok(bytes) => serde_json::from_slice(&bytes)
                        .map(Some)
                        .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display()))),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
                }
            }
        }
    }

    pub fn put(&self, entry: CacheEntry) -> Result<(), GatewayError> {
        match self {
            ResponseCache::Memory(m) => {
                m.lock().unwrap_or_else(|e| e.into_inner()).insert(entry.digest.clone(), entry);
                Ok(())
            }
            ResponseCache::Dir(dir) => {
                let path = dir.join(format!("{}.json", entry.digest));
                let mut bytes = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
                bytes.push(b'\n');
                crate::run::write_atomic(&path, &bytes).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway

/// Cache-fronted access to a backend. Safe to share across threads; a
/// per-digest lock makes concurrent identical requests hit the backend once.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: ResponseCache,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    backend_calls: AtomicU64,
    exec: Exec,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cache: ResponseCache) -> Self {
        Self {
            backend,
            cache,
            locks: Mutex::new(HashMap::new()),
            backend_calls: AtomicU64::new(0),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_key(&self, request: &ChatRequest) -> String {
        cache_key(request, self.backend.kind())
    }

    fn digest_lock(&self, digest: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(digest.to_string()).or_default().clone()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let digest = self.cache_key(request);
        let lock = self.digest_lock(&digest);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(hit) = self.cache.get(&digest)? {
            return Ok(ChatResponse {
                content: hit.content,
                backend_id: hit.backend_id,
                cached: true,
                latency_ms: 0,
            });
        }
        let started = Instant::now();
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let content = self.backend.complete(request, &digest)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let backend_id = self.backend.id();
        self.cache.put(CacheEntry {
            digest,
            backend_id: backend_id.clone(),
            model: request.model.clone(),
            content: content.clone(),
        })?;
        Ok(ChatResponse {
            content,
            backend_id,
            cached: false,
            latency_ms,
        })
    }

    /// Draws `runs` completions that differ only in `sample_index`
    /// (`0..runs`) and returns the ROUGE-L medoid with all candidates.
    pub fn complete_self_consistent(
        &self,
        request: &ChatRequest,
        runs: usize,
    ) -> Result<(ChatResponse, Vec<ChatResponse>), GatewayError> {
        if runs == 0 {
            return Err(GatewayError::InvalidRequest("self-consistency needs at least one run".into()));
        }
        let results = self.exec.map_range(runs, |i| {
            let mut r = request.clone();
            r.sample_index = i as u32;
            self.complete(&r)
        });
        let completed = results.iter().filter(|r| r.is_ok()).count();
        let mut candidates = Vec::with_capacity(runs);
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(c) => candidates.push(c),
                Err(e) => {
                    return Err(GatewayError::SelfConsistency {
                        runs,
                        completed,
                        failed_index: i,
                        source: Box::new(e),
                    })
                }
            }
        }
        let texts: Vec<&str> = candidates.iter().map(|c| c.content.as_str()).collect();
        let chosen = candidates[medoid_index(&texts)].clone();
        Ok((chosen, candidates))
    }
}

/// Index of the text with the highest mean ROUGE-L F1 to all the others;
/// ties go to the lowest index. Panics on an empty slice.
pub fn medoid_index<S: AsRef<str>>(texts: &[S]) -> usize {
    assert!(!texts.is_empty(), "medoid of an empty set");
    if texts.len() == 1 {
        return 0;
    }
    let seqs: Vec<TokenSeq> = texts.iter().map(|t| TokenSeq::new(t.as_ref())).collect();
    let n = seqs.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = rouge_l(&seqs[i], &seqs[j]).f1;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, row) in sim.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / (n - 1) as f64;
        if mean > best_score {
            best = i;
            best_score = mean;
        }
    }
    best
}
