use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError, RateLimiter, Usage};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_rpm() -> u32 {
    600
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            requests_per_minute: default_rpm(),
        }
    }
}

/// OpenAI-compatible chat-completions client.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    limiter: Arc<RateLimiter>,
}

enum Attempt {
    Done(ChatResponse),
    Transient { rate_limited: bool, reason: String },
    Fatal(String),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let limiter = Arc::new(RateLimiter::per_minute(config.requests_per_minute));
        Self::with_limiter(config, limiter)
    }

    /// Shares a limiter with other clients (e.g. external CRS calls).
    pub fn with_limiter(config: RemoteConfig, limiter: Arc<RateLimiter>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        RemoteBackend {
            config,
            agent,
            limiter,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        for m in &request.messages {
            messages.push(json!({"role": m.role.as_str(), "content": m.text}));
        }
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        self.limiter.acquire();
        let start = Instant::now();
        let mut call = self.agent.post(&self.endpoint());
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(body.clone()) {
            Ok(resp) => {
                let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
                match resp.into_json::<CompletionBody>() {
                    Ok(parsed) => match parsed.choices.into_iter().next() {
                        Some(choice) => Attempt::Done(ChatResponse {
                            text: choice.message.content.unwrap_or_default(),
                            usage: parsed.usage.unwrap_or_default(),
                            latency_ms,
                        }),
                        None => Attempt::Fatal("response has no choices".into()),
                    },
                    Err(e) => Attempt::Fatal(format!("malformed completion body: {e}")),
                }
            }
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                if code == 429 {
                    Attempt::Transient {
                        rate_limited: true,
                        reason: format!("429 {detail}"),
                    }
                } else if code >= 500 {
                    Attempt::Transient {
                        rate_limited: false,
                        reason: format!("{code} {detail}"),
                    }
                } else {
                    Attempt::Fatal(format!("{code} {detail}"))
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Transient {
                rate_limited: false,
                reason: t.to_string(),
            },
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let body = self.body(request);
        let attempts_allowed = self.config.max_retries + 1;
        let mut last_reason = String::new();
        let mut rate_limited = false;
        for attempt in 1..=attempts_allowed {
            match self.attempt(&body) {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Fatal(reason) => return Err(LlmError::BackendUnavailable(reason)),
                Attempt::Transient {
                    rate_limited: limited,
                    reason,
                } => {
                    warn!(tag = %request.tag, attempt, %reason, "transient backend failure");
                    rate_limited = limited;
                    last_reason = reason;
                    if attempt < attempts_allowed {
                        let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
            }
        }
        if rate_limited {
            Err(LlmError::RateLimited {
                attempts: attempts_allowed,
            })
        } else {
            Err(LlmError::BackendUnavailable(last_reason))
        }
    }
}
