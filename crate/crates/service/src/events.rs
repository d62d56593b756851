use serde::{Deserialize, Serialize};

use cshi_core::domain::{AgentMemory, LeakageFlags, Message, PreferenceFacet, SessionState, SessionStatus};
use cshi_core::harness::{ScenarioConfig, SessionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    #[default]
    Auto,
    HumanTakeover,
}

/// One entry of a session's stream and of its log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    /// Always first. Holds everything needed to rebuild the engine.
    SessionCreated {
        config: ScenarioConfig,
        spec: SessionSpec,
        state: SessionState,
    },
    MessageAppended { message: Message },
    FacetPromoted { facet: PreferenceFacet },
    MemoryUpdated { memory: AgentMemory },
    StatusChanged { status: SessionStatus },
    ControlChanged { control: Control },
    LeakageAudited { leakage: LeakageFlags },
}

/// Session as seen by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub control: Control,
    pub config: ScenarioConfig,
    pub state: SessionState,
    /// Seq of the last applied event.
    pub last_seq: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FoldError {
    #[error("event log is empty")]
    Empty,
    #[error("event log must start with session_created")]
    MissingHeader,
    #[error("event {0} out of order")]
    OutOfOrder(u64),
}

impl Snapshot {
    pub fn apply(&mut self, event: &Event) {
        match &event.body {
            EventBody::SessionCreated { config, state, .. } => {
                self.config = config.clone();
                self.state = state.clone();
            }
            EventBody::MessageAppended { message } => self.state.transcript.push(message.clone()),
            // Carried in full by the following memory_updated.
            EventBody::FacetPromoted { .. } => {}
            EventBody::MemoryUpdated { memory } => self.state.memory = memory.clone(),
            EventBody::StatusChanged { status } => self.state.status = *status,
            EventBody::ControlChanged { control } => self.control = *control,
            EventBody::LeakageAudited { leakage } => self.state.leakage = leakage.clone(),
        }
        self.last_seq = event.seq;
    }
}

/// Rebuilds a session from its log. Returns the spec from the header too.
pub fn fold(events: &[Event]) -> Result<(SessionSpec, Snapshot), FoldError> {
    let first = events.first().ok_or(FoldError::Empty)?;
    let EventBody::SessionCreated { config, spec, state } = &first.body else {
        return Err(FoldError::MissingHeader);
    };
    let mut snapshot = Snapshot {
        session_id: spec.session_id.clone(),
        control: Control::Auto,
        config: config.clone(),
        state: state.clone(),
        last_seq: first.seq,
    };
    for event in &events[1..] {
        if event.seq != snapshot.last_seq + 1 {
            return Err(FoldError::OutOfOrder(event.seq));
        }
        snapshot.apply(event);
    }
    Ok((spec.clone(), snapshot))
}
