//! CRS intent understanding.

use tracing::warn;

use super::{PluginError, SessionEnv};
use crate::domain::{attr, Intent, Message, Role};
use crate::llm::{ChatRequest, CLASSIFY_TEMPERATURE};
use crate::pipeline::{Plugin, PluginContext, PluginFlow};
use crate::text::normalize_text;

const INTENT_SYSTEM: &str = "You classify messages sent by a movie recommender.";

/// Maps loose attribute wording onto the attribute vocabulary.
fn canonical_attribute(raw: &str, vocab: &[String]) -> Option<String> {
    let norm = normalize_text(raw).replace(' ', "_");
    if let Some(v) = vocab.iter().find(|v| **v == norm) {
        return Some(v.clone());
    }
    let singular = norm.trim_end_matches('s');
    if let Some(v) = vocab.iter().find(|v| v.as_str() == singular) {
        return Some(v.clone());
    }
    let mapped = match singular {
        "filmmaker" | "directed_by" | "direction" => attr::DIRECTOR,
        "star" | "cast" | "actress" | "lead" => attr::ACTOR,
        "year" | "era" | "decade" | "release" | "release_year" | "date" => attr::RELEASE_DATE,
        "length" | "duration" | "running_time" => attr::RUNTIME,
        "keyword" | "plot" | "theme" | "topic" | "plot_keyword" => attr::PLOT_KEYWORDS,
        "type" | "kind" | "category" => attr::GENRE,
        _ => return None,
    };
    vocab.iter().find(|v| v.as_str() == mapped).cloned()
}

/// First vocabulary attribute named anywhere in `text`.
fn attribute_in_text(text: &str, vocab: &[String]) -> Option<String> {
    normalize_text(text)
        .split(' ')
        .find_map(|word| canonical_attribute(word, vocab))
}

fn parse_reply(reply: &str, vocab: &[String]) -> Intent {
    let json = reply
        .find('{')
        .zip(reply.rfind('}'))
        .filter(|(a, b)| a < b)
        .and_then(|(a, b)| serde_json::from_str::<serde_json::Value>(&reply[a..=b]).ok());
    let (label, attribute) = match &json {
        Some(v) => (
            v.get("intent").and_then(|x| x.as_str()).unwrap_or("").to_string(),
            v.get("attribute").and_then(|x| x.as_str()).map(str::to_string),
        ),
        None => (reply.to_string(), None),
    };
    let label = normalize_text(&label);
    if label.contains("recommend") {
        return Intent::Recommend;
    }
    if label.contains("chit") {
        return Intent::ChitChat;
    }
    if label.contains("ask") {
        let found = match attribute {
            Some(a) => canonical_attribute(&a, vocab),
            None => attribute_in_text(reply, vocab),
        };
        return match found {
            Some(rel_attr) => Intent::Ask { rel_attr },
            None => {
                warn!(reply, "ask intent without a known attribute, treating as chit-chat");
                Intent::ChitChat
            }
        };
    }
    Intent::ChitChat
}

/// Classifies a CRS message. Messages that carry a recommendation list are
/// `Recommend` without consulting the model.
pub fn classify_intent(env: &SessionEnv, last: &Message) -> Result<Intent, PluginError> {
    if last.role != Role::Crs {
        return Err(PluginError::Precondition(
            "intent understanding needs a CRS message".into(),
        ));
    }
    if last.is_recommendation() {
        return Ok(Intent::Recommend);
    }
    let vocab = env.catalog.attribute_vocabulary();
    let prompt = env.templates.render(
        "intent",
        &[("message", last.text.as_str()), ("attributes", &vocab.join(", "))],
    )?;
    let request = ChatRequest::new("intent", INTENT_SYSTEM)
        .with_user(prompt)
        .with_temperature(CLASSIFY_TEMPERATURE);
    let reply = env.llm.complete(&request)?.text;
    Ok(parse_reply(&reply, &vocab))
}

pub struct IntentPlugin;

impl Plugin for IntentPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        if let Some(last) = ctx.last_message.as_ref() {
            ctx.intent = Some(classify_intent(ctx.env, last)?);
        }
        Ok(PluginFlow::Continue)
    }
}
