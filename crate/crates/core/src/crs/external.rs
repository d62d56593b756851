use std::io::Read;
use std::sync::Arc;
use std::time::Duration;

use super::{parse_crs_reply, CrsAdapter, CrsError, CrsTurn, WireRequest};
use crate::domain::Message;
use crate::llm::RateLimiter;

/// Upper bound on a CRS reply body.
const MAX_BODY: u64 = 4 << 20;

/// Stateless HTTP client for an external CRS. Every call carries the whole
/// transcript, so one instance can serve any number of sessions.
#[derive(Clone)]
pub struct ExternalCrs {
    endpoint: String,
    agent: ureq::Agent,
    limiter: Option<Arc<RateLimiter>>,
}

impl ExternalCrs {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalCrs {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
            limiter: None,
        }
    }

    pub fn with_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }
}

impl CrsAdapter for ExternalCrs {
    fn next_turn(
        &mut self,
        session_id: &str,
        transcript: &[Message],
        max_items: usize,
    ) -> Result<CrsTurn, CrsError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let request = WireRequest::new(session_id, transcript, max_items);
        let body = serde_json::to_value(&request).expect("wire request serializes");
        let resp = self.agent.post(&self.endpoint).send_json(body).map_err(|e| match e {
            ureq::Error::Status(code, r) => {
                CrsError::Transport(format!("{code} {}", r.into_string().unwrap_or_default()))
            }
            ureq::Error::Transport(t) => CrsError::Transport(t.to_string()),
        })?;
        let mut bytes = Vec::new();
        resp.into_reader()
            .take(MAX_BODY)
            .read_to_end(&mut bytes)
            .map_err(|e| CrsError::Transport(e.to_string()))?;
        Ok(parse_crs_reply(&bytes, max_items)?)
    }
}
