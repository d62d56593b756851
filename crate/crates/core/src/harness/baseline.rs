//! Single-prompt simulator: one session-level prompt, the whole dialogue,
//! one call per turn. No pipeline and no title guard.

use super::HarnessError;
use crate::domain::{CatalogItem, RatingRecord, Role, SessionState};
use crate::llm::{ChatMessage, ChatRequest};
use crate::plugins::SessionEnv;

const OPENING: &str = "Start the conversation.";

/// `title: ...` followed by one `attribute: values` line per attribute.
pub fn target_info_text(targets: &[CatalogItem]) -> String {
    let mut lines = Vec::new();
    for t in targets {
        lines.push(format!("title: {}", t.display_title()));
        for (attribute, values) in &t.attributes {
            lines.push(format!("{}: {}", attribute.replace('_', " "), values.join(", ")));
        }
    }
    lines.join("\n")
}

pub fn ui_info_text(env: &SessionEnv, history: &[RatingRecord]) -> String {
    let lines: Vec<String> = history
        .iter()
        .filter_map(|r| {
            env.catalog
                .get(&r.item_id)
                .map(|item| format!("{} (rated {})", item.display_title(), r.rating))
        })
        .collect();
    if lines.is_empty() {
        "none".into()
    } else {
        lines.join("\n")
    }
}

pub(super) fn single_prompt_reply(
    env: &SessionEnv,
    state: &SessionState,
    history: Option<&[RatingRecord]>,
) -> Result<String, HarnessError> {
    let info = target_info_text(&state.target_items);
    let system = match history {
        Some(h) => env.templates.render(
            "single_prompt_ui",
            &[("target_info", &info), ("ui_info", &ui_info_text(env, h))],
        )?,
        None => env.templates.render("single_prompt", &[("target_info", &info)])?,
    };
    let mut request = ChatRequest::new("single_prompt", system);
    // The recommender is the model's interlocutor.
    for m in &state.transcript {
        request.messages.push(if m.role == Role::Crs {
            ChatMessage::user(m.text.clone())
        } else {
            ChatMessage::assistant(m.text.clone())
        });
    }
    if request.messages.last().is_none_or(|m| m.role != crate::llm::ChatRole::User) {
        request.messages.push(ChatMessage::user(OPENING));
    }
    request.temperature = crate::llm::GENERATE_TEMPERATURE;
    Ok(env.llm.complete(&request)?.text.trim().to_string())
}
