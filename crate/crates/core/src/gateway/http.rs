use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{CompletionProvider, ComponentModelConfig, GatewayError, ProviderReply};
use crate::prompt::PromptMessages;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connection(String),
}

/// One HTTP attempt. Non-2xx statuses are replies, not errors.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let result = req.config().timeout_global(Some(timeout)).build().send(body.to_string());
        match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp.body_mut().read_to_string().map_err(map_ureq)?;
                Ok(HttpReply { status, body })
            }
            Err(e) => Err(map_ureq(e)),
        }
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        other => TransportError::Connection(other.to_string()),
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base: Duration::from_millis(500), factor: 2 }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep after failed attempt `attempt` (1-based).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        self.base.saturating_mul(self.factor.saturating_pow(attempt.saturating_sub(1)))
    }

    /// Sum of all backoff caps, the most a call can spend sleeping.
    pub fn total_backoff_budget(&self) -> Duration {
        (1..self.max_attempts).map(|a| self.backoff_cap(a)).sum()
    }

    fn jittered(&self, attempt: u32) -> Duration {
        let cap = self.backoff_cap(attempt).as_millis() as u64;
        Duration::from_millis(if cap == 0 { 0 } else { rand::rng().random_range(0..=cap) })
    }
}

/// Provider for OpenAI-style chat-completion endpoints.
pub struct HttpProvider {
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
}

impl Default for HttpProvider {
    fn default() -> Self {
        Self::new(Box::new(UreqTransport::default()), RetryPolicy::default())
    }
}

impl HttpProvider {
    pub fn new(transport: Box<dyn Transport>, retry: RetryPolicy) -> Self {
        Self { transport, retry }
    }

    pub fn request_body(messages: &PromptMessages, cfg: &ComponentModelConfig) -> Value {
        json!({
            "model": cfg.model_id,
            "messages": messages.messages(),
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        })
    }
}

fn is_transient(status: u16) -> bool {
    status == 429 || (500..=599).contains(&status)
}

fn extract_text(body: &str) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::ResponseMalformed(format!("not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::ResponseMalformed("missing choices[0].message.content".into()))
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, messages: &PromptMessages, cfg: &ComponentModelConfig) -> Result<ProviderReply, GatewayError> {
        cfg.validate()?;
        let token = if cfg.credential_env_var.is_empty() {
            None
        } else {
            Some(
                std::env::var(&cfg.credential_env_var)
                    .map_err(|_| GatewayError::MissingCredential(cfg.credential_env_var.clone()))?,
            )
        };
        let body = Self::request_body(messages, cfg);
        let timeout = Duration::from_millis(cfg.request_timeout_ms);
        let mut last_reason = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            match self.transport.post_json(&cfg.endpoint_url, token.as_deref(), &body, timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return extract_text(&reply.body).map(|text| ProviderReply { text, attempts: attempt });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::AuthFailure { status: reply.status });
                }
                Ok(reply) if is_transient(reply.status) => last_reason = format!("HTTP {}", reply.status),
                Ok(reply) => {
                    return Err(GatewayError::ProviderUnavailable {
                        attempts: attempt,
                        reason: format!("HTTP {}", reply.status),
                    })
                }
                Err(TransportError::Timeout) => last_reason = "request timed out".into(),
                Err(TransportError::Connection(e)) => last_reason = e,
            }
            if attempt < self.retry.max_attempts {
                std::thread::sleep(self.retry.jittered(attempt));
            }
        }
        Err(GatewayError::ProviderUnavailable { attempts: self.retry.max_attempts.max(1), reason: last_reason })
    }
}
