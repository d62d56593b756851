use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CrsAdapter, CrsError, CrsKind, CrsTurn};
use crate::domain::{Message, RecommendedItem, Role};
use crate::llm::{ChatBackend, ChatRequest, CLASSIFY_TEMPERATURE, GENERATE_TEMPERATURE};
use crate::prompts::PromptTemplates;
use crate::text::normalize_text;

const CRS_SYSTEM: &str = "You are a helpful conversational movie recommender.";
const DIALOGUE_WINDOW: usize = 12;

/// Memory of the built-in agent for one session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrsAgentState {
    pub conversation_memory: Vec<Message>,
    /// (CRS round, action) for every turn taken.
    pub decision_log: Vec<(u32, CrsKind)>,
    pub elicited_preferences: Vec<String>,
}

impl CrsAgentState {
    fn decision_text(&self) -> String {
        if self.decision_log.is_empty() {
            return "none".into();
        }
        self.decision_log
            .iter()
            .map(|(round, kind)| format!("{round}: {}", kind.as_str()))
            .collect::<Vec<_>>()
            .join("; ")
    }

    fn preference_text(&self) -> String {
        if self.elicited_preferences.is_empty() {
            "none".into()
        } else {
            self.elicited_preferences.join(" | ")
        }
    }
}

/// Generative CRS with a strategy step (which action) and an action step
/// (the reply itself), both backed by the chat backend.
pub struct BuiltinCrs {
    llm: Arc<dyn ChatBackend>,
    templates: Arc<PromptTemplates>,
    temperature: f64,
    pub state: CrsAgentState,
}

impl BuiltinCrs {
    pub fn new(llm: Arc<dyn ChatBackend>, templates: Arc<PromptTemplates>) -> Self {
        BuiltinCrs {
            llm,
            templates,
            temperature: GENERATE_TEMPERATURE,
            state: CrsAgentState::default(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn strategy(&self, round: u32, last_user: &str) -> Result<CrsKind, CrsError> {
        let prompt = self.templates.render(
            "crs_strategy",
            &[
                ("round", &round.to_string()),
                ("decision_log", &self.state.decision_text()),
                ("preferences", &self.state.preference_text()),
                ("last_user", last_user),
            ],
        )
        .map_err(|e| CrsError::Backend(crate::llm::LlmError::InvalidRequest(e.to_string())))?;
        let request = ChatRequest::new("crs_strategy", CRS_SYSTEM)
            .with_user(prompt)
            .with_temperature(CLASSIFY_TEMPERATURE);
        let reply = normalize_text(&self.llm.complete(&request)?.text);
        Ok(if reply.contains("recommend") {
            CrsKind::Recommend
        } else if reply.contains("chit") || reply.contains("chat") {
            CrsKind::ChitChat
        } else {
            CrsKind::Ask
        })
    }

    fn action(&self, kind: CrsKind, max_items: usize) -> Result<String, CrsError> {
        let memory = &self.state.conversation_memory;
        let start = memory.len().saturating_sub(DIALOGUE_WINDOW);
        let dialogue = memory[start..]
            .iter()
            .map(|m| format!("{}: {}", m.role.wire_name(), m.text))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = self.templates.render(
            "crs_action",
            &[
                ("action", kind.as_str()),
                ("preferences", &self.state.preference_text()),
                ("decision_log", &self.state.decision_text()),
                ("dialogue", if dialogue.is_empty() { "(empty)" } else { &dialogue }),
                ("max_items", &max_items.to_string()),
            ],
        )
        .map_err(|e| CrsError::Backend(crate::llm::LlmError::InvalidRequest(e.to_string())))?;
        let request = ChatRequest::new("crs_action", CRS_SYSTEM)
            .with_user(prompt)
            .with_temperature(self.temperature);
        Ok(self.llm.complete(&request)?.text.trim().to_string())
    }
}

/// Titles from a numbered or bulleted list, e.g. `1. Heat (1995) - tense`.
pub fn parse_title_list(text: &str) -> Vec<String> {
    static LINE: OnceLock<Regex> = OnceLock::new();
    let line = LINE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*\u{2022}])\s+(.+?)\s*$").unwrap());
    let mut out: Vec<String> = Vec::new();
    for l in text.lines() {
        let Some(c) = line.captures(l) else { continue };
        let mut title = c[1].to_string();
        for sep in [" - ", " : ", " because "] {
            if let Some(i) = title.find(sep) {
                title.truncate(i);
            }
        }
        let title = title.trim_matches(|c: char| c == '*' || c == '"' || c.is_whitespace()).to_string();
        if !title.is_empty() && !out.contains(&title) {
            out.push(title);
        }
    }
    out
}

impl CrsAdapter for BuiltinCrs {
    fn next_turn(
        &mut self,
        _session_id: &str,
        transcript: &[Message],
        max_items: usize,
    ) -> Result<CrsTurn, CrsError> {
        self.state.conversation_memory = transcript.to_vec();
        self.state.elicited_preferences = transcript
            .iter()
            .filter(|m| m.role.is_user_side())
            // One line per field in the action prompt.
            .map(|m| m.text.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|t| !t.is_empty())
            .collect();
        let round = self.state.decision_log.len() as u32 + 1;
        let last_user = transcript
            .iter()
            .rev()
            .find(|m| m.role != Role::Crs)
            .map_or("(none)", |m| m.text.as_str());
        let has_user_reply = transcript.iter().any(|m| m.role.is_user_side());

        let mut kind = self.strategy(round, last_user)?;
        if kind == CrsKind::Recommend && !has_user_reply {
            kind = CrsKind::Ask;
        }
        let mut text = self.action(kind, max_items)?;
        let mut items = Vec::new();
        if kind == CrsKind::Recommend {
            items = parse_title_list(&text)
                .into_iter()
                .take(max_items)
                .map(|title| RecommendedItem {
                    item_id: None,
                    title,
                })
                .collect();
            if items.is_empty() {
                kind = CrsKind::ChitChat;
            }
        }
        if text.is_empty() {
            text = "Could you tell me more about what you like?".into();
        }
        self.state.decision_log.push((round, kind));
        Ok(CrsTurn { kind, text, items })
    }

    /// Ask and chit-chat turns are not told apart in a transcript; both are
    /// restored as asks.
    fn restore(&mut self, transcript: &[Message]) {
        self.state.conversation_memory = transcript.to_vec();
        self.state.decision_log = transcript
            .iter()
            .filter(|m| m.role == Role::Crs)
            .enumerate()
            .map(|(i, m)| {
                let kind = if m.is_recommendation() { CrsKind::Recommend } else { CrsKind::Ask };
                (i as u32 + 1, kind)
            })
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptFile, ScriptedBackend};

    fn crs(script: &str) -> BuiltinCrs {
        let script: ScriptFile = serde_json::from_str(script).unwrap();
        BuiltinCrs::new(
            Arc::new(ScriptedBackend::new(script).unwrap()),
            Arc::new(PromptTemplates::default()),
        )
    }

    const SCRIPT: &str = r#"{"rules":[
        {"tag":"crs_strategy","match":{"contains":"ROUND: 1\n"},"response":"ask"},
        {"tag":"crs_strategy","match":"any","response":"recommend"},
        {"tag":"crs_action","match":{"contains":"ACTION: ask"},"response":"What genres do you like?"},
        {"tag":"crs_action","match":{"contains":"ACTION: recommend"},"response":"1. Heat (1995) - tense\n2. Collateral (2004)\nEnjoy!"}
    ]}"#;

    fn user(text: &str, turn: u32) -> Message {
        Message { role: Role::Simulator, text: text.into(), turn, recommended_items: None }
    }

    #[test]
    fn opening_turn_asks_about_genre() {
        let mut c = crs(SCRIPT);
        let t = c.next_turn("s", &[], 10).unwrap();
        assert_eq!(t.kind, CrsKind::Ask);
        assert!(t.text.contains("genres"));
        assert!(t.items.is_empty());
    }

    #[test]
    fn no_recommend_before_a_user_reply() {
        let mut c = crs(r#"{"rules":[{"tag":"crs_strategy","match":"any","response":"recommend"},
            {"tag":"crs_action","match":{"contains":"ACTION: ask"},"response":"Hi! What do you like?"}]}"#);
        assert_eq!(c.next_turn("s", &[], 10).unwrap().kind, CrsKind::Ask);
    }

    #[test]
    fn recommendation_list_is_parsed_and_capped() {
        let mut c = crs(SCRIPT);
        c.next_turn("s", &[], 10).unwrap();
        let t = c.next_turn("s", &[user("crime please", 1)], 1).unwrap();
        assert_eq!(t.kind, CrsKind::Recommend);
        assert_eq!(t.items.len(), 1);
        assert_eq!(t.items[0].title, "Heat (1995)");
        assert_eq!(c.state.elicited_preferences, vec!["crime please"]);
    }

    #[test]
    fn decision_log_tracks_every_turn() {
        let mut c = crs(SCRIPT);
        let mut transcript = Vec::new();
        for i in 0..10u32 {
            let t = c.next_turn("s", &transcript, 10).unwrap();
            transcript.push(Message {
                role: Role::Crs,
                text: t.text,
                turn: 2 * i,
                recommended_items: None,
            });
            transcript.push(user("ok", 2 * i + 1));
        }
        assert_eq!(c.state.decision_log.len(), 10);
        assert_eq!(c.state.decision_log[0], (1, CrsKind::Ask));
    }

    #[test]
    fn title_list_parsing() {
        assert_eq!(
            parse_title_list("Here:\n1) **Up (2009)**\n- Heat : classic\n3. Up (2009)"),
            vec!["Up (2009)", "Heat"]
        );
    }
}
