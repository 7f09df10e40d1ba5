//! Chat-completion gateway: request types, fingerprints and the backends
//! (live HTTP, record, replay) behind one trait.

mod cache;
mod live;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheEntry, CacheStore, RecordBackend, ReplayBackend};
pub use live::{LiveBackend, RetryPolicy, DEFAULT_BASE_URL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
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

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A chat request: the conversation plus sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    pub n: u32,
    pub temperature: f64,
    pub model_name: String,
    pub max_output_tokens: u32,
}

impl ChatExchange {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidExchange(m.to_string()));
        match self.messages.last() {
            None => return invalid("no messages"),
            Some(m) if m.role != Role::User => return invalid("last message must have role user"),
            _ => {}
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return invalid("empty message content");
        }
        if self.n == 0 {
            return invalid("n must be at least 1");
        }
        if self.max_output_tokens == 0 {
            return invalid("max_output_tokens must be at least 1");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn last_user_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatCompletion {
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("authentication rejected by the completion endpoint (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited; gave up after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no cached completion for fingerprint {fingerprint}")]
    CacheMiss { fingerprint: String },
    #[error("requested {expected} completions but received {got}")]
    CountMismatch { expected: u32, got: usize },
    #[error("invalid exchange: {0}")]
    InvalidExchange(String),
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("cache store error at {path}: {message}")]
    Cache { path: String, message: String },
}

impl GatewayError {
    /// Fatal errors abort a batch instead of being recorded per question.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Auth { .. })
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        (**self).complete(exchange)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        (**self).complete(exchange)
    }
}

/// Stable digest of everything that affects a completion.
pub fn request_fingerprint(exchange: &ChatExchange) -> String {
    // Field order here is the canonical form; serde_json writes floats via
    // shortest round-trip formatting, which is platform independent.
    #[derive(Serialize)]
    struct Canonical<'a> {
        model: &'a str,
        temperature: f64,
        n: u32,
        max_tokens: u32,
        messages: &'a [ChatMessage],
    }
    let canonical = Canonical {
        model: &exchange.model_name,
        temperature: exchange.temperature,
        n: exchange.n,
        max_tokens: exchange.max_output_tokens,
        messages: &exchange.messages,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical exchange serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Backend driven by a closure. Used for scripted runs and tests.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatExchange) -> Result<ChatCompletion, GatewayError> + Send + Sync,
{
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        (self.0)(exchange)
    }
}

/// Caps the number of concurrent `complete` calls on the wrapped backend.
pub struct Throttled<B> {
    inner: B,
    limit: usize,
    inflight: Mutex<usize>,
    released: Condvar,
}

impl<B: ChatBackend> Throttled<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            inflight: Mutex::new(0),
            released: Condvar::new(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for Throttled<B> {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        {
            let mut n = self.inflight.lock().unwrap();
            while *n >= self.limit {
                n = self.released.wait(n).unwrap();
            }
            *n += 1;
        }
        let result = self.inner.complete(exchange);
        *self.inflight.lock().unwrap() -= 1;
        self.released.notify_one();
        result
    }
}

/// Checks the exchange and that the backend returned exactly `n` texts.
pub fn complete_checked(backend: &dyn ChatBackend, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
    exchange.validate()?;
    let completion = backend.complete(exchange)?;
    if completion.texts.len() != exchange.n as usize {
        return Err(GatewayError::CountMismatch {
            expected: exchange.n,
            got: completion.texts.len(),
        });
    }
    Ok(completion)
}
