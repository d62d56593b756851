//! Chat-completion backends.
//!
//! Every LLM-calling component talks to a [`ChatBackend`]. Three
//! implementations ship with the crate: [`ScriptedBackend`] (deterministic
//! rule tables for tests and CI), [`RemoteBackend`] (OpenAI-compatible HTTP)
//! and the [`RecordingBackend`]/[`ReplayBackend`] pair for bit-identical
//! re-runs.

mod ratelimit;
mod remote;
mod replay;
mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ratelimit::RateLimiter;
pub use remote::{RemoteBackend, RemoteConfig};
pub use replay::{open_replay, RecordingBackend, ReplayBackend, ReplayMode, ReplayStore};
pub use scripted::{MatchRule, ScriptRule, ScriptScope, ScriptedBackend, ScriptFile};

/// Temperature for classification-style calls.
pub const CLASSIFY_TEMPERATURE: f64 = 0.0;
/// Default temperature for generative calls.
pub const GENERATE_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Identifies the calling component, e.g. `intent` or `crs_strategy`.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, system_text: impl Into<String>) -> Self {
        ChatRequest {
            system_text: system_text.into(),
            messages: Vec::new(),
            temperature: GENERATE_TEMPERATURE,
            max_tokens: 512,
            tag: tag.into(),
        }
    }

    pub fn with_user(mut self, text: impl Into<String>) -> Self {
        self.messages.push(ChatMessage::user(text));
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.text.as_str())
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.tag.trim().is_empty() {
            return Err(LlmError::InvalidRequest("tag must be non-empty".into()));
        }
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("message list is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Stable replay key: SHA-256 over a canonical serialization with
    /// whitespace runs collapsed.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            tag: &'a str,
            system: String,
            messages: Vec<(&'static str, String)>,
            temperature: String,
            max_tokens: u32,
        }
        let canonical = Canonical {
            tag: &self.tag,
            system: collapse_ws(&self.system_text),
            messages: self
                .messages
                .iter()
                .map(|m| (m.role.as_str(), collapse_ws(&m.text)))
                .collect(),
            temperature: format!("{:.3}", self.temperature),
            max_tokens: self.max_tokens,
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: f64,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            usage: Usage::default(),
            latency_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LlmError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("no script rule for tag {tag:?}")]
    ScriptMiss { tag: String },
    #[error("replay store has no response for request {key} (tag {tag:?})")]
    ReplayMiss { key: String, tag: String },
    #[error("store i/o: {0}")]
    Store(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}
