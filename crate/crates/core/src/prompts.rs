//! Prompt templates with `{name}` placeholders.
//!
//! Defaults are compiled in from `templates/`; a directory holding
//! `<name>.txt` files overrides any subset of them without a rebuild.

use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TemplateError {
    #[error("template {name:?} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("reading templates: {0}")]
    Io(String),
}

/// (template name, required placeholders, default body)
const BUILTIN: &[(&str, &[&str], &str)] = &[
    (
        "preference_summary",
        &["liked", "disliked"],
        include_str!("../templates/preference_summary.txt"),
    ),
    ("intent", &["message", "attributes"], include_str!("../templates/intent.txt")),
    (
        "ask_retrieve",
        &["attribute", "history"],
        include_str!("../templates/ask_retrieve.txt"),
    ),
    (
        "ask_personalized",
        &["attribute", "history_items", "preferences", "message"],
        include_str!("../templates/ask_personalized.txt"),
    ),
    (
        "ask_nonpersonalized",
        &["attribute", "preferences", "message"],
        include_str!("../templates/ask_nonpersonalized.txt"),
    ),
    (
        "ask_no_preference",
        &["attribute", "other_preference", "message"],
        include_str!("../templates/ask_no_preference.txt"),
    ),
    (
        "recommend_accept",
        &["items", "dialogue"],
        include_str!("../templates/recommend_accept.txt"),
    ),
    (
        "recommend_reject",
        &["items", "preferences", "new_preferences"],
        include_str!("../templates/recommend_reject.txt"),
    ),
    (
        "chitchat",
        &["message", "preference", "dialogue"],
        include_str!("../templates/chitchat.txt"),
    ),
    ("opener", &["preference"], include_str!("../templates/opener.txt")),
    ("single_prompt", &["target_info"], include_str!("../templates/single_prompt.txt")),
    (
        "single_prompt_ui",
        &["target_info", "ui_info"],
        include_str!("../templates/single_prompt_ui.txt"),
    ),
    (
        "crs_strategy",
        &["round", "decision_log", "preferences", "last_user"],
        include_str!("../templates/crs_strategy.txt"),
    ),
    (
        "crs_action",
        &["action", "preferences", "dialogue", "max_items"],
        include_str!("../templates/crs_action.txt"),
    ),
];

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    bodies: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            bodies: BUILTIN
                .iter()
                .map(|(name, _, body)| (name.to_string(), body.to_string()))
                .collect(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates overlaid with every `<name>.txt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = Self::default();
        let entries = std::fs::read_dir(dir).map_err(|e| TemplateError::Io(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| TemplateError::Io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body =
                std::fs::read_to_string(&path).map_err(|e| TemplateError::Io(e.to_string()))?;
            templates.set(name, body)?;
        }
        Ok(templates)
    }

    /// Replaces one template after checking its required placeholders.
    pub fn set(&mut self, name: &str, body: impl Into<String>) -> Result<(), TemplateError> {
        let body = body.into();
        if let Some((_, required, _)) = BUILTIN.iter().find(|(n, _, _)| *n == name) {
            check_placeholders(name, &body, required)?;
        }
        self.bodies.insert(name.to_string(), body);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&str, TemplateError> {
        self.bodies
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        Ok(render(self.get(name)?, vars))
    }
}

pub fn check_placeholders(
    name: &str,
    body: &str,
    required: &[&str],
) -> Result<(), TemplateError> {
    for placeholder in required {
        if !body.contains(&format!("{{{placeholder}}}")) {
            return Err(TemplateError::MissingPlaceholder {
                name: name.to_string(),
                placeholder: placeholder.to_string(),
            });
        }
    }
    Ok(())
}

/// Substitutes `{name}` for each provided var. Braces that do not enclose a
/// provided name (JSON examples, unset optional fields) are kept verbatim,
/// except optional persona lines which render empty when absent.
pub fn render(body: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if is_ident(n) => {
                if let Some((_, v)) = vars.iter().find(|(k, _)| *k == n) {
                    out.push_str(v);
                } else if n == "persona" {
                    // optional everywhere
                } else {
                    out.push('{');
                    out.push_str(n);
                    out.push('}');
                }
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    // A dropped persona leaves a leading blank line.
    out.trim_start_matches('\n').to_string()
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}
