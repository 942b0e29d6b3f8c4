//! Chat-completions over HTTP.
//!
//! `POST {endpoint_url}/chat/completions` with a JSON body of `model`,
//! `messages`, `temperature` and `max_tokens`. Roles map system→system,
//! human→user, ai→assistant. A human message carrying an image is sent as a
//! content array with a text part and an `image_url` part.

use std::fmt;
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendReply, ChatBackend, CompletionRequest, FinishReason, GatewayConfig, GatewayError, Usage};
use crate::prompt::{ChatMessage, Role};

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend").field("url", &self.url).finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in the config.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let endpoint = cfg
            .endpoint_url
            .as_deref()
            .ok_or_else(|| GatewayError::InvalidConfig("http backend requires endpoint_url".into()))?;
        let var = cfg
            .api_key_env
            .as_deref()
            .ok_or_else(|| GatewayError::InvalidConfig("http backend requires api_key_env".into()))?;
        let api_key = std::env::var(var)
            .map_err(|_| GatewayError::AuthError(format!("environment variable {var} is not set")))?;
        Ok(Self::new(endpoint, api_key, Duration::from_secs(cfg.request_timeout_secs)))
    }

    pub fn new(endpoint_url: &str, api_key: String, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", endpoint_url.trim_end_matches('/')),
            api_key,
        }
    }
}

fn wire_role(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::Human => "user",
        Role::Ai => "assistant",
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    let content = match &m.image_url {
        Some(url) => json!([
            {"type": "text", "text": m.text},
            {"type": "image_url", "image_url": {"url": url}},
        ]),
        None => Value::String(m.text.clone()),
    };
    json!({"role": wire_role(m.role), "content": content})
}

pub(crate) fn request_body(req: &CompletionRequest) -> Value {
    json!({
        "model": req.model_name,
        "messages": req.messages.messages.iter().map(wire_message).collect::<Vec<_>>(),
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

pub(crate) fn parse_reply(body: &str) -> Result<BackendReply, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedResponse(m.to_string());
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| malformed("no choices"))?;
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let text = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str);
    let text = match (text, finish_reason) {
        (Some(t), _) => t.to_string(),
        (None, FinishReason::Stop) => return Err(malformed("missing message content")),
        (None, _) => String::new(),
    };
    let count = |k: &str| {
        v.get("usage")
            .and_then(|u| u.get(k))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(BackendReply {
        text,
        finish_reason,
        usage: Usage {
            prompt_tokens: count("prompt_tokens"),
            completion_tokens: count("completion_tokens"),
        },
    })
}

impl ChatBackend for HttpBackend {
    fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let body = request_body(req).to_string();
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| GatewayError::TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::TransportError(e.to_string()))?;
        match status {
            200..=299 => parse_reply(&text),
            401 | 403 => Err(GatewayError::AuthError(format!("HTTP {status}"))),
            429 => Err(GatewayError::RateLimited { attempts: 1 }),
            _ => Err(GatewayError::TransportError(format!("HTTP {status}"))),
        }
    }
}
