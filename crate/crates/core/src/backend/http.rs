use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{BackendError, BackendSpec, ChatRequest, ChatResponse, Role, TokenUsage, Transport};
use crate::imaging::data_uri;

/// `NARRATOR_API_KEY_<NAME>`, with the backend name upper-cased and every
/// non-alphanumeric character replaced by `_`.
pub fn credential_env_var(backend_name: &str) -> String {
    let suffix: String = backend_name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("NARRATOR_API_KEY_{suffix}")
}

/// OpenAI-style chat-completions client. Images travel as `image_url`
/// content parts carrying PNG data URIs.
#[derive(Debug)]
pub struct OpenAiTransport {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiTransport {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            client,
        })
    }

    /// Reads the credential from the backend's environment variable. A
    /// missing key is allowed (local servers often need none).
    pub fn from_env(spec: &BackendSpec) -> Result<Self, BackendError> {
        let key = std::env::var(credential_env_var(&spec.name)).ok();
        Self::new(
            spec.endpoint_url.clone(),
            key,
            Duration::from_secs(spec.timeout_secs),
        )
    }
}

/// Request body in chat-completions shape.
pub(crate) fn request_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            let mut content = vec![json!({"type": "text", "text": m.text})];
            content.extend(m.attachments.iter().map(|a| {
                json!({"type": "image_url", "image_url": {"url": data_uri(&a.0)}})
            }));
            json!({"role": role, "content": content})
        })
        .collect();
    json!({
        "model": request.spec.model_id,
        "messages": messages,
        "temperature": request.spec.temperature,
        "max_tokens": request.spec.max_output_tokens,
    })
}

pub(crate) fn parse_response(
    status: u16,
    body: &str,
    latency_ms: u64,
) -> Result<ChatResponse, BackendError> {
    match status {
        200..=299 => {}
        401 | 403 => return Err(BackendError::Auth(format!("HTTP {status}: {body}"))),
        429 => {
            return Err(BackendError::RateLimited {
                attempts: 1,
                message: format!("HTTP 429: {body}"),
            })
        }
        408 | 500..=599 => return Err(BackendError::Transport(format!("HTTP {status}: {body}"))),
        _ => return Err(BackendError::Contract(format!("HTTP {status}: {body}"))),
    }
    let json: Value =
        serde_json::from_str(body).map_err(|e| BackendError::Contract(e.to_string()))?;
    let content = &json["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // some servers return content parts even for replies
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => {
            return Err(BackendError::Contract(
                "missing choices[0].message.content".into(),
            ))
        }
    };
    Ok(ChatResponse {
        text,
        token_usage: TokenUsage {
            input: json["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            output: json["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        },
        latency_ms,
        raw_status: status,
    })
}

impl Transport for OpenAiTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut builder = self.client.post(&self.endpoint).json(&request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        parse_response(status, &body, started.elapsed().as_millis() as u64)
    }
}
