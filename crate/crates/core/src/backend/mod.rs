//! Chat-completion backends: request model, content digest, retrying
//! client, persistent response cache and transports.

mod cache;
mod http;
mod mock;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{cached_complete, CacheEntry, ResponseCache};
pub use http::{credential_env_var, OpenAiTransport};
pub use mock::MockTransport;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("credential rejected: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempt(s): {message}")]
    RateLimited { attempts: u32, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unparseable response: {0}")]
    Contract(String),
    #[error("request violates backend contract: {0}")]
    Precondition(String),
    #[error("cache i/o error: {0}")]
    CacheIo(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Self::Transport(_) | Self::RateLimited { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// OpenAI-style `/chat/completions` endpoint.
    #[default]
    Openai,
    /// Deterministic offline responder.
    Mock,
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_output_tokens() -> u32 {
    512
}
fn default_timeout_secs() -> u64 {
    120
}

/// A named model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub name: String,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: String,
    pub model_id: String,
    pub supports_images: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl BackendSpec {
    pub fn mock(name: &str, supports_images: bool) -> Self {
        Self {
            name: name.to_owned(),
            kind: BackendKind::Mock,
            endpoint_url: String::new(),
            model_id: format!("mock-{name}"),
            supports_images,
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.name.trim().is_empty() {
            return Err(BackendError::Precondition("backend name is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Precondition(format!(
                "{}: temperature {} outside [0, 2]",
                self.name, self.temperature
            )));
        }
        if self.kind == BackendKind::Openai && self.endpoint_url.is_empty() {
            return Err(BackendError::Precondition(format!(
                "{}: endpoint_url is required",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

/// Base64-encoded PNG bytes (no data-URI prefix).
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImagePayload(pub String);

impl ImagePayload {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.0.as_bytes()))
    }
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImagePayload({}..)", &self.digest()[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<ImagePayload>,
}

impl Message {
    pub fn user(text: impl Into<String>, attachments: Vec<ImagePayload>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            attachments,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub spec: BackendSpec,
}

impl ChatRequest {
    pub fn attachment_count(&self) -> usize {
        self.messages.iter().map(|m| m.attachments.len()).sum()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::Precondition(
                "request has no user message".into(),
            ));
        }
        if !self.spec.supports_images && self.attachment_count() > 0 {
            return Err(BackendError::Precondition(format!(
                "backend {:?} is text-only but the request carries {} image(s)",
                self.spec.name,
                self.attachment_count()
            )));
        }
        Ok(())
    }

    /// Content digest over every field that can change the model output.
    pub fn cache_key(&self) -> String {
        cache_key(self)
    }

    pub(crate) fn summary(&self) -> RequestSummary {
        RequestSummary {
            backend: self.spec.name.clone(),
            model_id: self.spec.model_id.clone(),
            temperature: self.spec.temperature,
            max_output_tokens: self.spec.max_output_tokens,
            messages: self
                .messages
                .iter()
                .map(|m| MessageSummary {
                    role: m.role,
                    text: m.text.clone(),
                    attachment_digests: m.attachments.iter().map(ImagePayload::digest).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSummary {
    pub role: Role,
    pub text: String,
    pub attachment_digests: Vec<String>,
}

/// What the cache records about the request that produced a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub backend: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub messages: Vec<MessageSummary>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub token_usage: TokenUsage,
    pub latency_ms: u64,
    pub raw_status: u16,
}

/// Canonical key material. Field order is fixed by the struct, so the
/// serialized bytes do not depend on any map ordering.
#[derive(Serialize)]
struct KeyMaterial<'a> {
    version: u32,
    model_id: &'a str,
    temperature: f64,
    max_output_tokens: u32,
    messages: Vec<KeyMessage<'a>>,
}

#[derive(Serialize)]
struct KeyMessage<'a> {
    role: Role,
    text: &'a str,
    attachments: Vec<String>,
}

/// SHA-256 (hex) of the canonical request material: model id, temperature,
/// output budget, messages in order and the digest of every attachment.
pub fn cache_key(request: &ChatRequest) -> String {
    let material = KeyMaterial {
        version: 1,
        model_id: &request.spec.model_id,
        temperature: request.spec.temperature,
        max_output_tokens: request.spec.max_output_tokens,
        messages: request
            .messages
            .iter()
            .map(|m| KeyMessage {
                role: m.role,
                text: &m.text,
                attachments: m.attachments.iter().map(ImagePayload::digest).collect(),
            })
            .collect(),
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// One network (or simulated) round trip. Implementations do not retry.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Exponential backoff: the wait before retry `k` (1-based) is
/// `base_delay * 2^(k-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

/// A backend spec bound to the transport that serves it.
#[derive(Clone)]
pub struct Backend {
    pub spec: BackendSpec,
    pub transport: Arc<dyn Transport>,
    pub retry: RetryPolicy,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend")
            .field("spec", &self.spec)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Backend {
    pub fn new(spec: BackendSpec, transport: Arc<dyn Transport>) -> Self {
        Self {
            spec,
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Builds the transport named by `spec.kind`.
    pub fn from_spec(spec: BackendSpec) -> Result<Self, BackendError> {
        spec.validate()?;
        let transport: Arc<dyn Transport> = match spec.kind {
            BackendKind::Openai => Arc::new(OpenAiTransport::from_env(&spec)?),
            BackendKind::Mock => Arc::new(MockTransport::new()),
        };
        Ok(Self::new(spec, transport))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        complete(self.transport.as_ref(), &self.retry, request)
    }
}

/// Validates `request`, then sends it, retrying transport failures and rate
/// limits with exponential backoff until the attempt budget is spent.
pub fn complete(
    transport: &dyn Transport,
    retry: &RetryPolicy,
    request: &ChatRequest,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let attempts = retry.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match transport.send(request) {
            Ok(resp) => return Ok(resp),
            Err(err) if err.is_retriable() && attempt < attempts => {
                tracing::warn!(attempt, backend = %request.spec.name, error = %err, "retrying");
                std::thread::sleep(retry.delay_before_retry(attempt));
                attempt += 1;
            }
            Err(BackendError::RateLimited { message, .. }) => {
                return Err(BackendError::RateLimited {
                    attempts: attempt,
                    message,
                })
            }
            Err(err) => return Err(err),
        }
    }
}
