use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, warn};

use super::{LlmError, LlmReply, PromptSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    #[default]
    Replay,
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f32,
    pub max_tokens: u32,
    pub max_retries: u32,
    /// Total live calls allowed; `None` is unlimited.
    pub max_calls: Option<u64>,
    pub requests_per_minute: u32,
    /// Prompt size above which the script context is truncated.
    pub context_token_budget: usize,
    pub request_timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            endpoint: None,
            model: "llama3-70b-instruct".into(),
            api_key_env: "NBRESTORE_LLM_API_KEY".into(),
            temperature: 0.0,
            max_tokens: 2048,
            max_retries: 3,
            max_calls: None,
            requests_per_minute: 30,
            context_token_budget: 6000,
            request_timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, TransportError>;
}

/// Chat-completions over HTTP.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(settings: &LlmSettings) -> Result<Self, LlmError> {
        let endpoint = settings
            .endpoint
            .as_deref()
            .ok_or_else(|| LlmError::EndpointUnavailable("no endpoint configured".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.request_timeout_secs))
            .build()
            .map_err(|e| LlmError::EndpointUnavailable(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key: std::env::var(&settings.api_key_env).ok(),
        })
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &CompletionRequest) -> Result<String, TransportError> {
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Fatal(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| TransportError::Fatal(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("response has no message content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredExchange {
    pub prompt: String,
    pub reply: String,
    pub timestamp: String,
    pub model: String,
}

/// Directory of `<fingerprint>.json` exchanges.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    dir: PathBuf,
}

impl ReplayStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn get(&self, fingerprint: &str) -> Result<Option<StoredExchange>, LlmError> {
        let path = self.path_for(fingerprint);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| LlmError::Store(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LlmError::Store(format!("{}: {e}", path.display()))),
        }
    }

    pub fn put(&self, fingerprint: &str, exchange: &StoredExchange) -> Result<(), LlmError> {
        fs::create_dir_all(&self.dir).map_err(|e| LlmError::Store(e.to_string()))?;
        let mut body = serde_json::to_string_pretty(exchange).map_err(|e| LlmError::Store(e.to_string()))?;
        body.push('\n');
        fs::write(self.path_for(fingerprint), body).map_err(|e| LlmError::Store(e.to_string()))
    }
}

struct TokenBucket {
    capacity: f64,
    tokens: f64,
    per_sec: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(per_minute: u32) -> Self {
        let capacity = per_minute.max(1) as f64;
        TokenBucket {
            capacity,
            tokens: capacity,
            per_sec: capacity / 60.0,
            last: Instant::now(),
        }
    }

    /// Takes one token, returning how long the caller must wait first.
    fn take(&mut self) -> Duration {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.per_sec).min(self.capacity);
        self.last = now;
        self.tokens -= 1.0;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.per_sec)
        }
    }
}

pub struct LlmClient {
    mode: Mode,
    settings: LlmSettings,
    store: Option<ReplayStore>,
    transport: Option<Box<dyn Transport>>,
    live_calls: AtomicU64,
    bucket: Mutex<TokenBucket>,
}

impl LlmClient {
    pub fn replay(store: ReplayStore) -> Self {
        Self::build(Mode::Replay, LlmSettings::default(), Some(store), None)
    }

    pub fn live(settings: LlmSettings, transport: Box<dyn Transport>) -> Self {
        Self::build(Mode::Live, settings, None, Some(transport))
    }

    pub fn record(settings: LlmSettings, transport: Box<dyn Transport>, store: ReplayStore) -> Self {
        Self::build(Mode::Record, settings, Some(store), Some(transport))
    }

    /// A transport given to a replay client is never used, which lets tests
    /// check that replay stays off the network.
    pub fn build(
        mode: Mode,
        settings: LlmSettings,
        store: Option<ReplayStore>,
        transport: Option<Box<dyn Transport>>,
    ) -> Self {
        let bucket = Mutex::new(TokenBucket::new(settings.requests_per_minute));
        LlmClient {
            mode,
            settings,
            store,
            transport,
            live_calls: AtomicU64::new(0),
            bucket,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn settings(&self) -> &LlmSettings {
        &self.settings
    }

    pub fn live_calls(&self) -> u64 {
        self.live_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, spec: &PromptSpec) -> Result<LlmReply, LlmError> {
        match self.mode {
            Mode::Replay => {
                let store = self
                    .store
                    .as_ref()
                    .ok_or_else(|| LlmError::Store("replay mode without a store".into()))?;
                let exchange = store.get(&spec.fingerprint)?.ok_or_else(|| LlmError::ReplayMiss {
                    fingerprint: spec.fingerprint.clone(),
                })?;
                Ok(LlmReply::parse(spec, exchange.reply))
            }
            Mode::Live => Ok(LlmReply::parse(spec, self.call_live(spec)?)),
            Mode::Record => {
                let raw = self.call_live(spec)?;
                if let Some(store) = &self.store {
                    store.put(
                        &spec.fingerprint,
                        &StoredExchange {
                            prompt: spec.rendered.clone(),
                            reply: raw.clone(),
                            timestamp: chrono::Utc::now().to_rfc3339(),
                            model: self.settings.model.clone(),
                        },
                    )?;
                }
                Ok(LlmReply::parse(spec, raw))
            }
        }
    }

    fn call_live(&self, spec: &PromptSpec) -> Result<String, LlmError> {
        let transport = self
            .transport
            .as_ref()
            .ok_or_else(|| LlmError::EndpointUnavailable("no transport configured".into()))?;
        let reserved = self.live_calls.fetch_add(1, Ordering::SeqCst);
        if self.settings.max_calls.is_some_and(|max| reserved >= max) {
            self.live_calls.fetch_sub(1, Ordering::SeqCst);
            return Err(LlmError::BudgetExceeded);
        }
        let request = CompletionRequest {
            model: self.settings.model.clone(),
            prompt: spec.rendered.clone(),
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
        };
        let mut backoff = Duration::from_millis(500);
        let mut attempt = 0;
        loop {
            let wait = self.bucket.lock().expect("rate limiter lock").take();
            if !wait.is_zero() {
                debug!(?wait, "rate limited");
                thread::sleep(wait);
            }
            match transport.complete(&request) {
                Ok(text) => return Ok(text),
                Err(TransportError::Transient(e)) if attempt < self.settings.max_retries => {
                    warn!(attempt, error = %e, "retrying completion");
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(LlmError::EndpointUnavailable(e.to_string())),
            }
        }
    }
}
