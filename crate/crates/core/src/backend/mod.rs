//! Chat-completion backend: live HTTP with retries and rate limiting, plus
//! record/replay through a cassette so whole pipeline runs can be
//! reproduced without network access.

mod cassette;
mod ratelimit;
mod request;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use cassette::{Cassette, CassetteEntry};
pub use ratelimit::RateLimiter;
pub use request::{canonical_json, hash_value, sha256_hex, ChatMessage, ChatRequest, MessageRole};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected by {endpoint} (HTTP {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("environment variable `{var}` with the API token is not set")]
    MissingCredentials { var: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RateLimitExhausted { attempts: u32, last: String },
    #[error("no cassette entry for request {hash}")]
    CassetteMiss { hash: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BackendError {
    /// Misconfiguration rather than a failure of the remote service.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            BackendError::MissingCredentials { .. } | BackendError::Config(_) | BackendError::Io { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_backoff_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.round() as u64)
    }
}

fn default_env_var() -> String {
    "OPENAI_API_KEY".into()
}

fn default_rps() -> usize {
    5
}

fn default_timeout_ms() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    #[serde(default = "default_env_var")]
    pub auth_token_env_var: String,
    #[serde(default = "default_rps")]
    pub requests_per_second: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub mode: BackendMode,
    #[serde(default)]
    pub cassette_path: Option<PathBuf>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            auth_token_env_var: default_env_var(),
            requests_per_second: default_rps(),
            retry: RetryPolicy::default(),
            mode: BackendMode::Live,
            cassette_path: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl BackendConfig {
    pub fn replay(cassette: impl Into<PathBuf>) -> Self {
        BackendConfig {
            mode: BackendMode::Replay,
            cassette_path: Some(cassette.into()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.requests_per_second == 0 {
            return Err(BackendError::Config("requests_per_second must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be positive".into()));
        }
        if self.mode != BackendMode::Live && self.cassette_path.is_none() {
            return Err(BackendError::Config(format!(
                "{:?} mode requires a cassette path",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub response_id: String,
    /// RFC 3339 time the response was produced (recorded time on replay).
    pub recorded_at: String,
}

/// Anything that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

/// Result of one HTTP attempt.
enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(BackendError),
}

/// POSTs JSON with retry, backoff and rate limiting. Shared by the chat
/// client and the checker endpoints.
#[derive(Debug)]
pub struct JsonTransport {
    endpoint: String,
    token: Option<String>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    agent: ureq::Agent,
    network_calls: AtomicUsize,
    issue_log: Mutex<Vec<Instant>>,
}

const ISSUE_LOG_CAP: usize = 10_000;

impl JsonTransport {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, rps: usize, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        JsonTransport {
            endpoint: endpoint.into(),
            token,
            retry,
            limiter: RateLimiter::per_second(rps.max(1)),
            agent,
            network_calls: AtomicUsize::new(0),
            issue_log: Mutex::new(Vec::new()),
        }
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    /// Instants at which HTTP attempts were issued (most recent 10k).
    pub fn issue_times(&self) -> Vec<Instant> {
        self.issue_log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let issued = self.limiter.acquire();
        {
            let mut log = self.issue_log.lock().unwrap_or_else(|p| p.into_inner());
            if log.len() >= ISSUE_LOG_CAP {
                log.remove(0);
            }
            log.push(issued);
        }
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Attempt::Retry(format!("timeout ({t})")),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                return Attempt::Retry(e.to_string())
            }
            Err(e) => return Attempt::Fatal(BackendError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().unwrap_or_default();
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(BackendError::Transport(format!("invalid JSON response: {e}"))),
            },
            401 | 403 => Attempt::Fatal(BackendError::Auth {
                endpoint: self.endpoint.clone(),
                status,
            }),
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(BackendError::Transport(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
    }

    pub fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.attempt(body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(why) => {
                    log::warn!("attempt {attempt}/{} to {} failed: {why}", self.retry.max_attempts, self.endpoint);
                    last = why;
                }
            }
            if attempt < self.retry.max_attempts {
                std::thread::sleep(self.retry.delay(attempt));
            }
        }
        Err(BackendError::RateLimitExhausted {
            attempts: self.retry.max_attempts,
            last,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub(crate) fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Reads the API token named by the config.
pub fn read_token(var: &str) -> Result<String, BackendError> {
    match std::env::var(var) {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(BackendError::MissingCredentials { var: var.to_string() }),
    }
}

/// The production chat client.
#[derive(Debug)]
pub struct LlmClient {
    mode: BackendMode,
    transport: Option<JsonTransport>,
    cassette: Option<Cassette>,
}

impl LlmClient {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let cassette_path = config.cassette_path.as_deref();
        match config.mode {
            BackendMode::Replay => Ok(LlmClient {
                mode: BackendMode::Replay,
                transport: None,
                cassette: Some(Cassette::load(cassette_path.unwrap())?),
            }),
            mode => {
                let token = read_token(&config.auth_token_env_var)?;
                let transport = JsonTransport::new(
                    config.endpoint_url.clone(),
                    Some(token),
                    config.requests_per_second,
                    config.retry.clone(),
                    Duration::from_millis(config.timeout_ms),
                );
                let cassette = match mode {
                    BackendMode::Record => Some(Cassette::open_for_recording(cassette_path.unwrap())?),
                    _ => None,
                };
                Ok(LlmClient {
                    mode,
                    transport: Some(transport),
                    cassette,
                })
            }
        }
    }

    /// Replay-only client over an in-memory cassette.
    pub fn from_cassette(cassette: Cassette) -> Self {
        LlmClient {
            mode: BackendMode::Replay,
            transport: None,
            cassette: Some(cassette),
        }
    }

    pub fn mode(&self) -> BackendMode {
        self.mode
    }

    /// HTTP attempts issued so far; always zero in replay mode.
    pub fn network_calls(&self) -> usize {
        self.transport.as_ref().map_or(0, JsonTransport::network_calls)
    }

    pub fn issue_times(&self) -> Vec<Instant> {
        self.transport.as_ref().map(JsonTransport::issue_times).unwrap_or_default()
    }
}

impl ChatBackend for LlmClient {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let hash = request.request_hash();
        if self.mode == BackendMode::Replay {
            let entry = self
                .cassette
                .as_ref()
                .and_then(|c| c.lookup(&hash))
                .ok_or(BackendError::CassetteMiss { hash: hash.clone() })?;
            let text = entry
                .response
                .as_str()
                .ok_or_else(|| BackendError::Config(format!("cassette entry {hash} holds no text response")))?;
            return Ok(Completion {
                text: text.to_string(),
                response_id: entry.response_id.clone().unwrap_or_else(|| hash.clone()),
                recorded_at: entry.recorded_at.clone(),
            });
        }

        let transport = self.transport.as_ref().expect("live client has a transport");
        let body = transport.post(&request.wire_body())?;
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))?
            .to_string();
        let response_id = body
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| hash.clone());
        let completion = Completion {
            text,
            response_id,
            recorded_at: now_rfc3339(),
        };
        if let Some(cassette) = &self.cassette {
            cassette.record(&CassetteEntry {
                request_hash: hash,
                request: serde_json::to_value(request).expect("request serializes"),
                response: Value::String(completion.text.clone()),
                response_id: Some(completion.response_id.clone()),
                recorded_at: completion.recorded_at.clone(),
            })?;
        }
        Ok(completion)
    }
}

/// A JSON-in/JSON-out service (checker endpoints) with the same mode,
/// retry and cassette semantics as the chat client. The auth token is
/// optional here: it is sent only if the named variable is set.
#[derive(Debug)]
pub struct JsonEndpoint {
    mode: BackendMode,
    transport: Option<JsonTransport>,
    cassette: Option<Cassette>,
}

impl JsonEndpoint {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let cassette_path = config.cassette_path.as_deref();
        if config.mode == BackendMode::Replay {
            return Ok(JsonEndpoint {
                mode: BackendMode::Replay,
                transport: None,
                cassette: Some(Cassette::load(cassette_path.unwrap())?),
            });
        }
        let token = read_token(&config.auth_token_env_var).ok();
        let cassette = match config.mode {
            BackendMode::Record => Some(Cassette::open_for_recording(cassette_path.unwrap())?),
            _ => None,
        };
        Ok(JsonEndpoint {
            mode: config.mode,
            transport: Some(JsonTransport::new(
                config.endpoint_url.clone(),
                token,
                config.requests_per_second,
                config.retry.clone(),
                Duration::from_millis(config.timeout_ms),
            )),
            cassette,
        })
    }

    pub fn from_cassette(cassette: Cassette) -> Self {
        JsonEndpoint {
            mode: BackendMode::Replay,
            transport: None,
            cassette: Some(cassette),
        }
    }

    pub fn network_calls(&self) -> usize {
        self.transport.as_ref().map_or(0, JsonTransport::network_calls)
    }

    pub fn call(&self, body: &Value) -> Result<Value, BackendError> {
        let hash = hash_value(body);
        if self.mode == BackendMode::Replay {
            return self
                .cassette
                .as_ref()
                .and_then(|c| c.lookup(&hash))
                .map(|e| e.response.clone())
                .ok_or(BackendError::CassetteMiss { hash });
        }
        let transport = self.transport.as_ref().expect("live endpoint has a transport");
        let response = transport.post(body)?;
        if let Some(cassette) = &self.cassette {
            cassette.record(&CassetteEntry {
                request_hash: hash,
                request: body.clone(),
                response: response.clone(),
                response_id: None,
                recorded_at: now_rfc3339(),
            })?;
        }
        Ok(response)
    }
}
