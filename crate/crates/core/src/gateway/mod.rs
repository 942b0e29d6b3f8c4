//! Chat-completion gateway.
//!
//! [`Gateway::complete`] consults the response cache, then the backend
//! (retrying rate limits and transport failures with exponential backoff),
//! persists the response and appends a usage line to the run's ledger.

mod cache;
mod http;
mod mock;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{ChatTranscript, TranscriptError};

pub use cache::{cache_key, ResponseCache};
pub use http::HttpBackend;
pub use mock::{load_mock_script, MockBackend, MockEntry, MockFailure};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("mock script exhausted at request {request_tag}")]
    ScriptExhausted { request_tag: String },
    #[error("mock script entry expected {expected:?} in the final human message of request {request_tag}")]
    MockMismatch {
        request_tag: String,
        expected: String,
    },
    #[error("mock script {}:{line}: {message}", path.display())]
    ScriptParse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid request {request_tag}: {source}")]
    InvalidRequest {
        request_tag: String,
        #[source]
        source: TranscriptError,
    },
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("usage ledger: {0}")]
    Ledger(#[source] std::io::Error),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        matches!(self, Self::RateLimited { .. } | Self::TransportError(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: ChatTranscript,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Provenance label, e.g. `gen-dataset/rel_001`. Not part of the cache key.
    pub request_tag: String,
    /// Distinguishes repeated draws of an identical prompt. Zero leaves the
    /// cache key as the plain content hash.
    #[serde(default)]
    pub sample_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a backend returns for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub cached: bool,
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError>;

    /// Backends whose replies depend on request order (the scripted mock)
    /// must be driven one request at a time in a deterministic order.
    fn requires_ordered_dispatch(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            backoff_base_ms: 500,
        }
    }
}

fn default_model() -> String {
    "gpt-4".into()
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_ledger: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
}

impl GatewayConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        Self {
            backend: BackendKind::Mock,
            endpoint_url: None,
            api_key_env: None,
            model_name: default_model(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            max_concurrency: default_concurrency(),
            retry: RetryPolicy::default(),
            cache_dir: None,
            mock_script: Some(script.into()),
            usage_ledger: None,
            request_timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be positive");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be positive");
        }
        match self.backend {
            BackendKind::Http if self.endpoint_url.is_none() => bad("http backend requires endpoint_url"),
            BackendKind::Http if self.api_key_env.is_none() => bad("http backend requires api_key_env"),
            BackendKind::Mock if self.mock_script.is_none() => bad("mock backend requires mock_script"),
            _ => Ok(()),
        }
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    /// A request using this config's model parameters.
    pub fn request(&self, messages: ChatTranscript, request_tag: impl Into<String>) -> CompletionRequest {
        self.params().request(messages, request_tag)
    }
}

/// Decoding parameters stamped onto every request of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            model_name: default_model(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl ModelParams {
    pub fn request(&self, messages: ChatTranscript, request_tag: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            messages,
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            request_tag: request_tag.into(),
            sample_index: 0,
        }
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Logical requests that reached the backend (retries not counted).
    pub backend_requests: u64,
}

#[derive(Serialize)]
struct LedgerLine<'a> {
    request_tag: &'a str,
    model_name: &'a str,
    prompt_tokens: u64,
    completion_tokens: u64,
    cached: bool,
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    concurrency: usize,
    limiter: Limiter,
    ledger: Option<Mutex<File>>,
    hits: AtomicU64,
    misses: AtomicU64,
    backend_requests: AtomicU64,
}

impl Gateway {
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend: Box<dyn ChatBackend> = match cfg.backend {
            BackendKind::Mock => Box::new(load_mock_script(
                cfg.mock_script.as_deref().expect("validated"),
            )?),
            BackendKind::Http => Box::new(HttpBackend::from_config(cfg)?),
        };
        Self::with_backend(cfg, backend)
    }

    pub fn with_backend(cfg: &GatewayConfig, backend: Box<dyn ChatBackend>) -> Result<Self, GatewayError> {
        if cfg.max_concurrency == 0 {
            return Err(GatewayError::InvalidConfig("max_concurrency must be positive".into()));
        }
        let ledger = match &cfg.usage_ledger {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(GatewayError::Ledger)?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(GatewayError::Ledger)?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        let concurrency = if backend.requires_ordered_dispatch() {
            1
        } else {
            cfg.max_concurrency
        };
        Ok(Self {
            backend,
            cache: cfg.cache_dir.clone().map(ResponseCache::new),
            retry: cfg.retry.clone(),
            concurrency,
            limiter: Limiter::new(cfg.max_concurrency),
            ledger,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            backend_requests: AtomicU64::new(0),
        })
    }

    /// Worker count callers should use when fanning requests out.
    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            cache_hits: self.hits.load(Ordering::SeqCst),
            cache_misses: self.misses.load(Ordering::SeqCst),
            backend_requests: self.backend_requests.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        req.messages
            .validate()
            .map_err(|source| GatewayError::InvalidRequest {
                request_tag: req.request_tag.clone(),
                source,
            })?;
        let key = cache_key(req);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            let resp = CompletionResponse {
                text: hit.text,
                finish_reason: hit.finish_reason,
                usage: hit.usage,
                cached: true,
            };
            self.record_usage(req, &resp)?;
            return Ok(resp);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        self.backend_requests.fetch_add(1, Ordering::SeqCst);

        let reply = self.send_with_retry(req)?;
        if reply.finish_reason != FinishReason::Error {
            if let Some(cache) = &self.cache {
                if let Err(e) = cache.put(&key, &reply) {
                    log::warn!("could not cache response for {}: {e}", req.request_tag);
                }
            }
        }
        let resp = CompletionResponse {
            text: reply.text,
            finish_reason: reply.finish_reason,
            usage: reply.usage,
            cached: false,
        };
        self.record_usage(req, &resp)?;
        Ok(resp)
    }

    fn send_with_retry(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(req)
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                    log::debug!("{}: {e}; retrying in {delay} ms", req.request_tag);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(GatewayError::RateLimited { .. }) => {
                    return Err(GatewayError::RateLimited { attempts: attempt })
                }
                other => return other,
            }
        }
    }

    fn record_usage(&self, req: &CompletionRequest, resp: &CompletionResponse) -> Result<(), GatewayError> {
        let Some(ledger) = &self.ledger else {
            return Ok(());
        };
        let mut line = serde_json::to_string(&LedgerLine {
            request_tag: &req.request_tag,
            model_name: &req.model_name,
            prompt_tokens: resp.usage.prompt_tokens,
            completion_tokens: resp.usage.completion_tokens,
            cached: resp.cached,
        })
        .expect("ledger line serializes");
        line.push('\n');
        let mut f = ledger.lock().unwrap();
        f.write_all(line.as_bytes()).map_err(GatewayError::Ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{ChatMessage, Role};
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn transcript(text: &str) -> ChatTranscript {
        ChatTranscript {
            messages: vec![
                ChatMessage::new(Role::System, "sys"),
                ChatMessage::new(Role::Human, text),
            ],
        }
    }

    struct Scripted {
        failures_before_success: AtomicUsize,
        failure: fn() -> GatewayError,
        calls: AtomicUsize,
    }

    impl ChatBackend for Scripted {
        fn send(&self, _req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .failures_before_success
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err((self.failure)());
            }
            Ok(BackendReply {
                text: "ok".into(),
                finish_reason: FinishReason::Stop,
                usage: Usage::default(),
            })
        }
    }

    fn cfg() -> GatewayConfig {
        let mut c = GatewayConfig::mock("unused");
        c.retry = RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 1,
        };
        c
    }

    #[test]
    fn rate_limits_are_retried_then_surfaced() {
        let backend = Scripted {
            failures_before_success: AtomicUsize::new(2),
            failure: || GatewayError::RateLimited { attempts: 1 },
            calls: AtomicUsize::new(0),
        };
        let gw = Gateway::with_backend(&cfg(), Box::new(backend)).unwrap();
        let req = cfg().request(transcript("a"), "t");
        assert_eq!(gw.complete(&req).unwrap().text, "ok");

        let backend = Scripted {
            failures_before_success: AtomicUsize::new(5),
            failure: || GatewayError::RateLimited { attempts: 1 },
            calls: AtomicUsize::new(0),
        };
        let gw = Gateway::with_backend(&cfg(), Box::new(backend)).unwrap();
        assert!(matches!(
            gw.complete(&req),
            Err(GatewayError::RateLimited { attempts: 3 })
        ));
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let backend = Arc::new(Scripted {
            failures_before_success: AtomicUsize::new(1),
            failure: || GatewayError::AuthError("bad key".into()),
            calls: AtomicUsize::new(0),
        });
        struct Shared(Arc<Scripted>);
        impl ChatBackend for Shared {
            fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
                self.0.send(req)
            }
        }
        let gw = Gateway::with_backend(&cfg(), Box::new(Shared(backend.clone()))).unwrap();
        let req = cfg().request(transcript("a"), "t");
        assert!(matches!(gw.complete(&req), Err(GatewayError::AuthError(_))));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn invalid_transcript_rejected_before_backend() {
        let gw = Gateway::with_backend(
            &cfg(),
            Box::new(Scripted {
                failures_before_success: AtomicUsize::new(0),
                failure: || unreachable!(),
                calls: AtomicUsize::new(0),
            }),
        )
        .unwrap();
        let req = cfg().request(ChatTranscript::default(), "empty");
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest { .. })));
        assert_eq!(gw.stats().backend_requests, 0);
    }

    #[test]
    fn in_flight_requests_bounded() {
        struct Slow {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(BackendReply {
                    text: req.request_tag.clone(),
                    finish_reason: FinishReason::Stop,
                    usage: Usage::default(),
                })
            }
        }
        let slow = Arc::new(Slow {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        struct Shared(Arc<Slow>);
        impl ChatBackend for Shared {
            fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
                self.0.send(req)
            }
        }
        let mut c = cfg();
        c.max_concurrency = 3;
        let gw = Gateway::with_backend(&c, Box::new(Shared(slow.clone()))).unwrap();
        std::thread::scope(|s| {
            for i in 0..12 {
                let gw = &gw;
                let c = &c;
                s.spawn(move || {
                    let req = c.request(transcript(&i.to_string()), format!("r{i}"));
                    gw.complete(&req).unwrap();
                });
            }
        });
        assert!(slow.peak.load(Ordering::SeqCst) <= 3);
        assert_eq!(gw.stats().backend_requests, 12);
    }

    #[test]
    fn config_validation() {
        let mut c = GatewayConfig::mock("s.jsonl");
        assert!(c.validate().is_ok());
        c.backend = BackendKind::Http;
        assert!(c.validate().is_err());
        c.endpoint_url = Some("http://localhost:1".into());
        assert!(c.validate().is_err());
        c.api_key_env = Some("KEY".into());
        assert!(c.validate().is_ok());
        c.max_concurrency = 0;
        assert!(c.validate().is_err());
    }
}
