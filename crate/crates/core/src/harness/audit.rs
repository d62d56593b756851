use super::SessionRecord;
use crate::domain::{LeakEvidence, LeakKind, LeakageFlags, Role, SessionState};
use crate::text::contains_title;

/// Scans a finished session for target titles: in the annotated prefix
/// (history leak) and in simulator-authored messages (response leak).
/// A title split across two messages is not detected.
pub fn audit_leakage(state: &SessionState) -> LeakageFlags {
    let titles = state.target_titles();
    let mut evidence = Vec::new();
    for (i, message) in state.transcript.iter().enumerate() {
        let kind = if i < state.seed_prefix_len {
            LeakKind::History
        } else if message.role == Role::Simulator {
            LeakKind::Response
        } else {
            continue;
        };
        for title in &titles {
            if contains_title(&message.text, title) {
                evidence.push(LeakEvidence {
                    kind,
                    turn: message.turn,
                    title: title.clone(),
                });
            }
        }
    }
    LeakageFlags::from_evidence(evidence)
}

/// Recomputes the leakage flags of archived sessions.
pub fn audit_records(records: &mut [SessionRecord]) {
    for r in records {
        r.state.leakage = audit_leakage(&r.state);
    }
}
