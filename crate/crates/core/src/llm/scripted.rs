use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError};

/// What part of the request a rule is matched against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptScope {
    #[default]
    LastUser,
    /// System text followed by every message, newline separated.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Case-insensitive substring.
    Contains(String),
    /// Regular expression; captures can be referenced in the response as
    /// `$1` or `${name}`.
    Regex(String),
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Calling component tag, or `*` for any.
    pub tag: String,
    #[serde(rename = "match")]
    pub matcher: MatchRule,
    #[serde(default)]
    pub scope: ScriptScope,
    pub response: String,
}

/// On-disk script format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Per-tag response used when no rule matches.
    #[serde(default)]
    pub defaults: BTreeMap<String, String>,
}

enum CompiledMatcher {
    Contains(String),
    Regex(Regex),
    Any,
}

struct CompiledRule {
    tag: String,
    matcher: CompiledMatcher,
    scope: ScriptScope,
    response: String,
}

/// Deterministic backend driven by a rule table. Rules are tried in file
/// order; the first rule whose tag and matcher fit wins.
pub struct ScriptedBackend {
    rules: Vec<CompiledRule>,
    defaults: BTreeMap<String, String>,
    strict: bool,
    calls: Mutex<HashMap<String, usize>>,
}

impl ScriptedBackend {
    pub fn new(script: ScriptFile) -> Result<Self, LlmError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for rule in script.rules {
            let matcher = match rule.matcher {
                MatchRule::Contains(s) => CompiledMatcher::Contains(s.to_lowercase()),
                MatchRule::Regex(pattern) => CompiledMatcher::Regex(
                    Regex::new(&pattern)
                        .map_err(|e| LlmError::InvalidRequest(format!("bad script regex: {e}")))?,
                ),
                MatchRule::Any => CompiledMatcher::Any,
            };
            rules.push(CompiledRule {
                tag: rule.tag,
                matcher,
                scope: rule.scope,
                response: rule.response,
            });
        }
        Ok(ScriptedBackend {
            rules,
            defaults: script.defaults,
            strict: script.strict,
            calls: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Store(format!("{}: {e}", path.display())))?;
        let script: ScriptFile = serde_json::from_str(&raw)
            .map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::new(script)
    }

    /// Number of requests served for `tag` so far.
    pub fn calls(&self, tag: &str) -> usize {
        self.calls.lock().unwrap().get(tag).copied().unwrap_or(0)
    }

    fn respond(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let last_user = request.last_user_text().unwrap_or("");
        let mut all_text: Option<String> = None;
        for rule in &self.rules {
            if rule.tag != "*" && rule.tag != request.tag {
                continue;
            }
            let haystack: &str = match rule.scope {
                ScriptScope::LastUser => last_user,
                ScriptScope::All => all_text.get_or_insert_with(|| {
                    let mut s = request.system_text.clone();
                    for m in &request.messages {
                        s.push('\n');
                        s.push_str(&m.text);
                    }
                    s
                }),
            };
            match &rule.matcher {
                CompiledMatcher::Any => return Ok(rule.response.clone()),
                CompiledMatcher::Contains(needle) => {
                    if haystack.to_lowercase().contains(needle.as_str()) {
                        return Ok(rule.response.clone());
                    }
                }
                CompiledMatcher::Regex(re) => {
                    if let Some(caps) = re.captures(haystack) {
                        let mut out = String::new();
                        caps.expand(&rule.response, &mut out);
                        return Ok(out);
                    }
                }
            }
        }
        if let Some(default) = self.defaults.get(&request.tag).or_else(|| self.defaults.get("*")) {
            return Ok(default.clone());
        }
        if self.strict {
            Err(LlmError::ScriptMiss {
                tag: request.tag.clone(),
            })
        } else {
            Ok(String::new())
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        *self.calls.lock().unwrap().entry(request.tag.clone()).or_default() += 1;
        self.respond(request).map(ChatResponse::text)
    }
}
