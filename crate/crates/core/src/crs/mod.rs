//! The recommender side of a conversation: the CRS wire protocol, an HTTP
//! adapter for external systems and a built-in LLM-driven agent.
//!
//! Wire request (one POST per CRS turn, full context every time):
//!
//! ```json
//! {"session_id": "u1-42", "turn": 3,
//!  "transcript": [{"role": "user", "text": "..."},
//!                 {"role": "assistant", "text": "...", "items": [{"title": "Up"}]}],
//!  "max_items": 10}
//! ```
//!
//! Wire response: `{"kind": "ask"|"recommend"|"chit_chat", "text": "...",
//! "items": [{"item_id": "...", "title": "..."}]}`.

mod builtin;
mod external;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Message, RecommendedItem};
use crate::llm::LlmError;

pub use builtin::{BuiltinCrs, CrsAgentState};
pub use external::ExternalCrs;

/// Default cap on recommendation list length.
pub const DEFAULT_MAX_ITEMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrsKind {
    Ask,
    Recommend,
    #[serde(alias = "chitchat")]
    ChitChat,
}

impl CrsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CrsKind::Ask => "ask",
            CrsKind::Recommend => "recommend",
            CrsKind::ChitChat => "chit_chat",
        }
    }
}

/// One validated CRS reply. `items` is non-empty exactly for `Recommend`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrsTurn {
    pub kind: CrsKind,
    pub text: String,
    #[serde(default)]
    pub items: Vec<RecommendedItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProblem {
    pub field: String,
    pub problem: String,
}

/// A malformed CRS reply, with one entry per offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolViolation {
    pub problems: Vec<FieldProblem>,
}

impl fmt::Display for ProtocolViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.problems.iter().map(|p| format!("{}: {}", p.field, p.problem)).collect();
        write!(f, "protocol violation ({})", parts.join("; "))
    }
}

impl std::error::Error for ProtocolViolation {}

#[derive(Debug, thiserror::Error)]
pub enum CrsError {
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("CRS endpoint: {0}")]
    Transport(String),
}

/// Validates a raw wire reply against the `CrsTurn` invariants. Unknown
/// fields are ignored.
pub fn validate_crs_reply(raw: &Value, max_items: usize) -> Result<CrsTurn, ProtocolViolation> {
    let mut problems = Vec::new();
    let Some(obj) = raw.as_object() else {
        push(&mut problems, "$", "expected a JSON object".into());
        return Err(ProtocolViolation { problems });
    };

    let kind = match obj.get("kind") {
        None => {
            push(&mut problems, "kind", "missing".into());
            None
        }
        Some(v) => match serde_json::from_value::<CrsKind>(v.clone()) {
            Ok(k) => Some(k),
            Err(_) => {
                push(&mut problems, "kind", format!("expected ask, recommend or chit_chat, got {v}"));
                None
            }
        },
    };

    let text = match obj.get("text") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => {
            push(&mut problems, "text", format!("expected a string, got {other}"));
            String::new()
        }
    };

    let mut items = Vec::new();
    match obj.get("items") {
        None | Some(Value::Null) => {}
        Some(Value::Array(list)) => {
            if list.len() > max_items {
                push(&mut problems, "items", format!("{} items exceed the cap of {max_items}", list.len()));
            }
            for (i, entry) in list.iter().enumerate() {
                match parse_item(entry) {
                    Ok(item) => items.push(item),
                    Err(why) => push(&mut problems, &format!("items[{i}]"), why),
                }
            }
        }
        Some(other) => push(&mut problems, "items", format!("expected an array, got {other}")),
    }

    match kind {
        Some(CrsKind::Recommend)
            if items.is_empty() && !problems.iter().any(|p| p.field.starts_with("items")) =>
        {
            push(&mut problems, "items", "a recommend turn needs at least one item".into())
        }
        Some(k) if k != CrsKind::Recommend && !items.is_empty() => {
            push(&mut problems, "items", format!("a {} turn must not carry items", k.as_str()))
        }
        _ => {}
    }

    if problems.is_empty() {
        Ok(CrsTurn {
            kind: kind.expect("kind checked above"),
            text,
            items,
        })
    } else {
        Err(ProtocolViolation { problems })
    }
}

fn push(problems: &mut Vec<FieldProblem>, field: &str, problem: String) {
    problems.push(FieldProblem {
        field: field.to_string(),
        problem,
    });
}

fn parse_item(entry: &Value) -> Result<RecommendedItem, String> {
    let obj = entry.as_object().ok_or("expected an object")?;
    let title = match obj.get("title") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::String(_)) => return Err("title is empty".into()),
        Some(_) => return Err("title must be a string".into()),
        None => return Err("title missing".into()),
    };
    let item_id = match obj.get("item_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone().into()),
        Some(Value::Number(n)) => Some(n.to_string().into()),
        Some(_) => return Err("item_id must be a string or number".into()),
    };
    Ok(RecommendedItem { item_id, title })
}

/// Parses and validates a wire body.
pub fn parse_crs_reply(body: &[u8], max_items: usize) -> Result<CrsTurn, ProtocolViolation> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ProtocolViolation {
        problems: vec![FieldProblem {
            field: "$".into(),
            problem: format!("not JSON: {e}"),
        }],
    })?;
    validate_crs_reply(&value, max_items)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireMessage {
    pub role: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<RecommendedItem>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub session_id: String,
    pub turn: u32,
    pub transcript: Vec<WireMessage>,
    pub max_items: usize,
}

impl WireRequest {
    /// Human and simulator messages both go out as `user`.
    pub fn new(session_id: &str, transcript: &[Message], max_items: usize) -> Self {
        WireRequest {
            session_id: session_id.to_string(),
            turn: transcript.last().map_or(0, |m| m.turn + 1),
            transcript: transcript
                .iter()
                .map(|m| WireMessage {
                    role: m.role.wire_name().to_string(),
                    text: m.text.clone(),
                    items: m.recommended_items.clone(),
                })
                .collect(),
            max_items,
        }
    }
}

/// A recommender taking part in one session.
pub trait CrsAdapter: Send {
    fn next_turn(
        &mut self,
        session_id: &str,
        transcript: &[Message],
        max_items: usize,
    ) -> Result<CrsTurn, CrsError>;

    /// Rebuilds internal state from the CRS-side turns of a saved
    /// conversation. Stateless adapters ignore it.
    fn restore(&mut self, _transcript: &[Message]) {}
}

impl<T: CrsAdapter + ?Sized> CrsAdapter for Box<T> {
    fn next_turn(
        &mut self,
        session_id: &str,
        transcript: &[Message],
        max_items: usize,
    ) -> Result<CrsTurn, CrsError> {
        (**self).next_turn(session_id, transcript, max_items)
    }

    fn restore(&mut self, transcript: &[Message]) {
        (**self).restore(transcript)
    }
}

/// Makes a fresh adapter for each session.
pub type CrsFactory = std::sync::Arc<dyn Fn() -> Box<dyn CrsAdapter> + Send + Sync>;
