//! Completion providers behind one interface.
//!
//! [`Gateway`] wraps a provider, times each call and keeps a bounded log of
//! [`CompletionRecord`]s. Providers: [`HttpProvider`] for chat-completion
//! HTTP endpoints, [`ScriptedProvider`] for offline tests, and
//! [`RecordReplayProvider`] for archiving and replaying real responses.

mod http;
mod replay;
mod scripted;

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{Component, PromptMessages};

pub use http::{HttpProvider, HttpReply, RetryPolicy, Transport, TransportError, UreqTransport};
pub use replay::{prompt_hash, RecordReplayProvider, ReplayMode};
pub use scripted::{ScriptEntry, ScriptedProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentModelConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key; empty for none.
    pub credential_env_var: String,
    pub request_timeout_ms: u64,
}

impl Default for ComponentModelConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o".into(),
            temperature: 0.2,
            max_output_tokens: 2048,
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            credential_env_var: "OPENAI_API_KEY".into(),
            request_timeout_ms: 60_000,
        }
    }
}

impl ComponentModelConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::Config(format!("temperature {} is outside [0, 2]", self.temperature)));
        }
        if self.request_timeout_ms == 0 {
            return Err(GatewayError::Config("request_timeout_ms must be > 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::Config("max_output_tokens must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-component model settings, read from a TOML file with one table per
/// component (`[description]`, `[skeleton]`, ...). An optional `[default]`
/// table supplies the settings of components without their own table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfigSet {
    pub default: ComponentModelConfig,
    pub components: BTreeMap<Component, ComponentModelConfig>,
}

impl ModelConfigSet {
    pub fn get(&self, c: Component) -> &ComponentModelConfig {
        self.components.get(&c).unwrap_or(&self.default)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GatewayError> {
        let mut tables: BTreeMap<String, ComponentModelConfig> =
            toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        let default = tables.remove("default").unwrap_or_default();
        let mut components = BTreeMap::new();
        for (name, cfg) in tables {
            let c: Component = name.parse().map_err(|_| GatewayError::Config(format!("unknown section [{name}]")))?;
            cfg.validate()?;
            components.insert(c, cfg);
        }
        default.validate()?;
        Ok(Self { default, components })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub messages: PromptMessages,
    pub response_text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("provider unavailable after {attempts} attempt(s): {reason}")]
    ProviderUnavailable { attempts: u32, reason: String },
    #[error("provider rejected the credentials (HTTP {status})")]
    AuthFailure { status: u16 },
    #[error("malformed provider response: {0}")]
    ResponseMalformed(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingCredential(String),
    #[error("no unconsumed script entry matches the prompt")]
    ScriptExhausted,
    #[error("no archived response for prompt {0}")]
    ReplayMiss(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error("model configuration: {0}")]
    Config(String),
}

/// A provider's answer to one completion call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderReply {
    pub text: String,
    pub attempts: u32,
}

/// A chat-completion backend. Implementations must tolerate concurrent calls.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, messages: &PromptMessages, cfg: &ComponentModelConfig) -> Result<ProviderReply, GatewayError>;
}

const RECORD_LOG_CAP: usize = 4096;

/// Provider wrapper that records every successful completion.
pub struct Gateway {
    provider: Arc<dyn CompletionProvider>,
    records: Mutex<VecDeque<CompletionRecord>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn CompletionProvider>) -> Self {
        Self { provider, records: Mutex::new(VecDeque::new()) }
    }

    pub fn complete(&self, messages: &PromptMessages, cfg: &ComponentModelConfig) -> Result<String, GatewayError> {
        let started = Instant::now();
        let reply = self.provider.complete(messages, cfg)?;
        let record = CompletionRecord {
            messages: messages.clone(),
            response_text: reply.text.clone(),
            model_id: cfg.model_id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempt_count: reply.attempts.max(1),
        };
        let mut log = self.records.lock().unwrap_or_else(|e| e.into_inner());
        if log.len() == RECORD_LOG_CAP {
            log.pop_front();
        }
        log.push_back(record);
        Ok(reply.text)
    }

    /// Snapshot of the most recent completion records, oldest first.
    pub fn records(&self) -> Vec<CompletionRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).iter().cloned().collect()
    }
}
