//! Response plugins: opener, personalized and non-personalized asks,
//! recommendation feedback and chit-chat.
//!
//! Each reply passes through the same post-checks: the title guard and the
//! Unknown-facet scrub (inside [`generate`]), then a readout check that
//! appends any facet value the plugin contract requires but the model left
//! out.

use serde::{Deserialize, Serialize};

use super::guard::mentions_value;
use super::preferences::anonymize_facet;
use super::{generate, persona_block, MemoryEvent, PluginError, SessionEnv};
use crate::domain::{AgentMemory, Intent, Message, PreferenceFacet, RecommendedItem, Role};
use crate::llm::{ChatRequest, CLASSIFY_TEMPERATURE};
use crate::pipeline::{Plugin, PluginContext, PluginFlow};
use crate::text::{normalize_text, normalize_title};

const DIALOGUE_WINDOW: usize = 10;
const RETRIEVE_SYSTEM: &str = "You retrieve relevant items from a viewing history.";

/// Outcome of the personalized ask route. `handled` is false when the
/// long-term history holds nothing relevant, so the non-personalized route
/// takes over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRouteResult {
    pub handled: bool,
    pub response_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendOutcome {
    pub accepted: bool,
    pub response_text: String,
    pub activated_facets: Vec<PreferenceFacet>,
}

/// `attribute: value; ...` or `none`.
pub fn facet_phrase<'a>(facets: impl IntoIterator<Item = &'a PreferenceFacet>) -> String {
    let parts: Vec<String> = facets
        .into_iter()
        .map(|f| format!("{}: {}", f.attribute.replace('_', " "), f.value))
        .collect();
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join("; ")
    }
}

fn dialogue_text(memory: &AgentMemory) -> String {
    let log = &memory.dialogue_log;
    let start = log.len().saturating_sub(DIALOGUE_WINDOW);
    let lines: Vec<String> = log[start..]
        .iter()
        .map(|m| {
            let who = if m.role == Role::Crs { "Recommender" } else { "You" };
            format!("{who}: {}", m.text)
        })
        .collect();
    if lines.is_empty() {
        "(no conversation yet)".to_string()
    } else {
        lines.join("\n")
    }
}

/// Appends a sentence voicing every value of `required` the reply missed.
fn ensure_mentions(text: String, required: &[&str], lead: &str) -> String {
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|v| !mentions_value(&text, v))
        .collect();
    if missing.is_empty() {
        return text;
    }
    let sentence = format!("{lead} {}.", missing.join(" and "));
    if text.trim().is_empty() {
        sentence
    } else {
        format!("{} {sentence}", text.trim_end())
    }
}

fn known_for<'m>(memory: &'m AgentMemory, attribute: &str) -> Vec<&'m PreferenceFacet> {
    memory.known_facets().filter(|f| f.attribute == attribute).collect()
}

/// Known facet to bring up unprompted: the first one the user side has not
/// voiced yet, else the first one.
fn steering_facet(memory: &AgentMemory) -> Option<PreferenceFacet> {
    let said: Vec<&str> = memory
        .dialogue_log
        .iter()
        .filter(|m| m.role.is_user_side())
        .map(|m| m.text.as_str())
        .collect();
    memory
        .known_facets()
        .find(|f| !said.iter().any(|t| mentions_value(t, &f.value)))
        .or_else(|| memory.known_facets().next())
        .cloned()
}

fn ask_attribute(intent: Option<&Intent>) -> Result<String, PluginError> {
    intent
        .and_then(Intent::rel_attr)
        .map(str::to_string)
        .ok_or_else(|| PluginError::Precondition("ask route needs an ask intent".into()))
}

fn last_text(last: Option<&Message>) -> &str {
    last.map_or("", |m| m.text.as_str())
}

/// Opening line of a fresh conversation.
pub fn opener(env: &SessionEnv, memory: &AgentMemory, temperature: f64) -> Result<String, PluginError> {
    let facet = steering_facet(memory);
    let preference = facet.as_ref().map_or("none".to_string(), |f| facet_phrase([f]));
    let prompt = env.templates.render(
        "opener",
        &[("persona", &persona_block(memory)), ("preference", &preference)],
    )?;
    let text = generate(env, &memory.real_time, "opener", prompt, temperature)?;
    Ok(match &facet {
        Some(f) => ensure_mentions(text, &[f.value.as_str()], "I'm in the mood for"),
        None => ensure_steer(text),
    })
}

/// History items relevant to `attribute`, as judged by the retrieval call.
/// Only titles from the history are returned.
pub fn retrieve_history(
    env: &SessionEnv,
    memory: &AgentMemory,
    attribute: &str,
) -> Result<Vec<String>, PluginError> {
    let mut titles = Vec::new();
    let mut lines = Vec::new();
    for r in &memory.long_term.interaction_history {
        if env.oracle.is_target_id(&r.item_id) {
            continue;
        }
        let Some(item) = env.catalog.get(&r.item_id) else {
            continue;
        };
        let values = item
            .attributes
            .get(attribute)
            .map(|v| v.join(", "))
            .unwrap_or_else(|| "unknown".into());
        lines.push(format!("{} (rated {}) | {attribute}: {values}", item.display_title(), r.rating));
        titles.push(item.display_title());
    }
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    let prompt = env.templates.render(
        "ask_retrieve",
        &[("attribute", attribute), ("history", &lines.join("\n"))],
    )?;
    let request = ChatRequest::new("ask_retrieve", RETRIEVE_SYSTEM)
        .with_user(prompt)
        .with_temperature(CLASSIFY_TEMPERATURE);
    let reply = env.llm.complete(&request)?.text;
    let mut found = Vec::new();
    for line in reply.lines() {
        let cleaned = line
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
            .split('|')
            .next()
            .unwrap_or("")
            .trim();
        let cleaned = cleaned.split(" (rated").next().unwrap_or(cleaned).trim();
        if cleaned.is_empty() || normalize_text(cleaned) == "none" {
            continue;
        }
        let key = normalize_title(cleaned);
        if let Some(t) = titles.iter().find(|t| normalize_title(t) == key) {
            if !found.contains(t) && !env.oracle.leaks(t) {
                found.push(t.clone());
            }
        }
    }
    Ok(found)
}

/// Ask route grounded in the long-term history.
pub fn personalized_ask(
    env: &SessionEnv,
    memory: &AgentMemory,
    intent: Option<&Intent>,
    last: Option<&Message>,
    temperature: f64,
) -> Result<AskRouteResult, PluginError> {
    let attribute = ask_attribute(intent)?;
    let related = retrieve_history(env, memory, &attribute)?;
    if related.is_empty() {
        return Ok(AskRouteResult {
            handled: false,
            response_text: None,
        });
    }
    let matching = known_for(memory, &attribute);
    let prompt = env.templates.render(
        "ask_personalized",
        &[
            ("persona", &persona_block(memory)),
            ("attribute", &attribute.replace('_', " ")),
            ("history_items", &related.join("; ")),
            ("preferences", &facet_phrase(matching.iter().copied())),
            ("message", last_text(last)),
        ],
    )?;
    let text = generate(env, &memory.real_time, "ask_personalized", prompt, temperature)?;
    let titles: Vec<&str> = related.iter().map(String::as_str).collect();
    let text = ensure_mentions(text, &titles, "I remember enjoying");
    let values: Vec<&str> = matching.iter().map(|f| f.value.as_str()).collect();
    let text = ensure_mentions(text, &values, "I'd like");
    Ok(AskRouteResult {
        handled: true,
        response_text: Some(text),
    })
}

fn denies_preference(text: &str) -> bool {
    let norm = format!(" {} ", normalize_text(text));
    [" no ", " not ", " dont ", " doesnt ", " any ", " whatever ", " open to "]
        .iter()
        .any(|w| norm.contains(w))
}

/// Ask route over real-time facets only.
pub fn nonpersonalized_ask(
    env: &SessionEnv,
    memory: &AgentMemory,
    intent: Option<&Intent>,
    last: Option<&Message>,
    temperature: f64,
) -> Result<String, PluginError> {
    let attribute = ask_attribute(intent)?;
    let spoken_attr = attribute.replace('_', " ");
    let matching = known_for(memory, &attribute);
    let persona = persona_block(memory);
    if !matching.is_empty() {
        let values: Vec<&str> = matching.iter().map(|f| f.value.as_str()).collect();
        let prompt = env.templates.render(
            "ask_nonpersonalized",
            &[
                ("persona", &persona),
                ("attribute", &spoken_attr),
                ("preferences", &values.join(", ")),
                ("message", last_text(last)),
            ],
        )?;
        let text = generate(env, &memory.real_time, "ask_nonpersonalized", prompt, temperature)?;
        return Ok(ensure_mentions(text, &values, "I'd like"));
    }
    let other = memory.known_facets().find(|f| f.attribute != attribute).cloned();
    let other_phrase = other.as_ref().map_or("none".to_string(), |f| facet_phrase([f]));
    let prompt = env.templates.render(
        "ask_no_preference",
        &[
            ("persona", &persona),
            ("attribute", &spoken_attr),
            ("other_preference", &other_phrase),
            ("message", last_text(last)),
        ],
    )?;
    let mut text = generate(env, &memory.real_time, "ask_no_preference", prompt, temperature)?;
    if !denies_preference(&text) {
        text = format!("I don't have a particular {spoken_attr} in mind. {text}")
            .trim()
            .to_string();
    }
    Ok(match &other {
        Some(f) => ensure_mentions(text, &[f.value.as_str()], "I do like"),
        None => text,
    })
}

/// Whether a recommended item, or the CRS text, exhibits a facet value.
fn exhibits(env: &SessionEnv, items: &[RecommendedItem], crs_text: &str, facet: &PreferenceFacet) -> bool {
    let wanted = normalize_text(&facet.value);
    let by_attribute = items.iter().filter_map(|i| env.catalog.resolve(i)).any(|item| {
        item.attributes
            .get(&facet.attribute)
            .into_iter()
            .flatten()
            .filter_map(|v| anonymize_facet(&PreferenceFacet::new(&facet.attribute, v), &env.sensitive).ok())
            .any(|f| normalize_text(&f.value) == wanted)
    });
    by_attribute || mentions_value(crs_text, &facet.value)
}

/// Judges a recommendation. Acceptance is a title match against the
/// session targets; on rejection, Unknown facets exhibited by the
/// recommendation are promoted and voiced.
pub fn recommend_response(
    env: &SessionEnv,
    memory: &mut AgentMemory,
    last: &Message,
    temperature: f64,
) -> Result<(RecommendOutcome, Vec<MemoryEvent>), PluginError> {
    let items: &[RecommendedItem] = last.recommended_items.as_deref().unwrap_or(&[]);
    let listed: Vec<String> = items.iter().map(|i| env.oracle.redact(&i.title)).collect();
    let listed = if listed.is_empty() { last.text.clone() } else { listed.join("; ") };
    let persona = persona_block(memory);
    if items.iter().any(|i| env.oracle.is_target(i)) {
        let prompt = env.templates.render(
            "recommend_accept",
            &[("persona", &persona), ("items", &listed), ("dialogue", &dialogue_text(memory))],
        )?;
        let text = generate(env, &memory.real_time, "recommend_accept", prompt, temperature)?;
        return Ok((
            RecommendOutcome {
                accepted: true,
                response_text: text,
                activated_facets: Vec::new(),
            },
            Vec::new(),
        ));
    }

    let promote_at = last.turn + 1;
    let hits: Vec<usize> = memory
        .real_time
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.is_known() && exhibits(env, items, &last.text, f))
        .map(|(i, _)| i)
        .collect();
    let mut activated = Vec::new();
    let mut events = Vec::new();
    for i in hits {
        if memory.real_time[i].promote(promote_at) {
            activated.push(memory.real_time[i].clone());
            events.push(MemoryEvent::FacetPromoted {
                facet: memory.real_time[i].clone(),
            });
        }
    }
    let prompt = env.templates.render(
        "recommend_reject",
        &[
            ("persona", &persona),
            ("items", &listed),
            ("preferences", &facet_phrase(memory.known_facets())),
            ("new_preferences", &facet_phrase(&activated)),
        ],
    )?;
    let text = generate(env, &memory.real_time, "recommend_reject", prompt, temperature)?;
    let values: Vec<&str> = activated.iter().map(|f| f.value.as_str()).collect();
    let text = ensure_mentions(text, &values, "Actually, that reminds me I'd enjoy");
    Ok((
        RecommendOutcome {
            accepted: false,
            response_text: text,
            activated_facets: activated,
        },
        events,
    ))
}

fn ensure_steer(text: String) -> String {
    let norm = normalize_text(&text);
    if ["recommend", "suggest", "suggestion"].iter().any(|w| norm.contains(w)) {
        text
    } else {
        format!("{} Could you recommend a movie?", text.trim_end()).trim().to_string()
    }
}

/// Chit-chat reply that steers back toward a recommendation.
pub fn chitchat(
    env: &SessionEnv,
    memory: &AgentMemory,
    last: Option<&Message>,
    temperature: f64,
) -> Result<String, PluginError> {
    let facet = steering_facet(memory);
    let preference = facet.as_ref().map_or("none".to_string(), |f| facet_phrase([f]));
    let prompt = env.templates.render(
        "chitchat",
        &[
            ("persona", &persona_block(memory)),
            ("dialogue", &dialogue_text(memory)),
            ("message", last_text(last)),
            ("preference", &preference),
        ],
    )?;
    let text = generate(env, &memory.real_time, "chitchat", prompt, temperature)?;
    Ok(match &facet {
        Some(f) => ensure_mentions(text, &[f.value.as_str()], "Anyway, I'm hoping to find something with"),
        None => ensure_steer(text),
    })
}

pub struct OpenerPlugin {
    pub temperature: f64,
}

impl Plugin for OpenerPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        ctx.response = Some(opener(ctx.env, ctx.memory, self.temperature)?);
        Ok(PluginFlow::Handled)
    }
}

pub struct PersonalizedAskPlugin {
    pub temperature: f64,
}

impl Plugin for PersonalizedAskPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        let result = personalized_ask(
            ctx.env,
            ctx.memory,
            ctx.intent.as_ref(),
            ctx.last_message.as_ref(),
            self.temperature,
        )?;
        match result.response_text {
            Some(text) if result.handled => {
                ctx.response = Some(text);
                Ok(PluginFlow::Handled)
            }
            _ => Ok(PluginFlow::Continue),
        }
    }
}

pub struct NonPersonalizedAskPlugin {
    pub temperature: f64,
}

impl Plugin for NonPersonalizedAskPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        ctx.response = Some(nonpersonalized_ask(
            ctx.env,
            ctx.memory,
            ctx.intent.as_ref(),
            ctx.last_message.as_ref(),
            self.temperature,
        )?);
        Ok(PluginFlow::Handled)
    }
}

pub struct RecommendResponsePlugin {
    pub temperature: f64,
}

impl Plugin for RecommendResponsePlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        let last = ctx
            .last_message
            .clone()
            .ok_or_else(|| PluginError::Precondition("no recommendation to judge".into()))?;
        let (outcome, events) = recommend_response(ctx.env, ctx.memory, &last, self.temperature)?;
        ctx.events.extend(events);
        ctx.scratch.insert("accepted".into(), outcome.accepted.into());
        ctx.response = Some(outcome.response_text);
        Ok(PluginFlow::Handled)
    }
}

pub struct ChitChatPlugin {
    pub temperature: f64,
}

impl Plugin for ChitChatPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        ctx.response = Some(chitchat(
            ctx.env,
            ctx.memory,
            ctx.last_message.as_ref(),
            self.temperature,
        )?);
        Ok(PluginFlow::Handled)
    }
}
