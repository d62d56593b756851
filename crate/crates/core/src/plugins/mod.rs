//! The simulator plugins and the default plugin set.
//!
//! | stage               | plugin id              | role                               |
//! |---------------------|------------------------|------------------------------------|
//! | user_profile_init   | `basic_info`           | raw record -> basic info + history |
//! | user_profile_init   | `preference_summary`   | history -> taste summary           |
//! | preferences_init    | `realtime_preferences` | target attributes -> facets        |
//! | message_handling    | `conversation_opener`  | first line of a fresh conversation |
//! | message_handling    | `intent_understanding` | CRS message -> intent              |
//! | message_handling    | `personalized_ask`     | ask, grounded in history           |
//! | message_handling    | `nonpersonalized_ask`  | ask, real-time facets only         |
//! | message_handling    | `recommend_response`   | accept / reject / activate         |
//! | message_handling    | `chitchat_response`    | chit-chat steering back            |

pub mod guard;
pub mod intent;
pub mod preferences;
pub mod profile;
pub mod respond;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentMemory, Catalog, PreferenceFacet};
use crate::llm::{ChatBackend, ChatRequest, LlmError, GENERATE_TEMPERATURE};
use crate::pipeline::{
    Activation, PipelineConfig, PipelineError, Plugin, PluginConfigEntry, PluginDescriptor,
    PluginPipeline, StageId,
};
use crate::prompts::{PromptTemplates, TemplateError};

pub use guard::{NoTargets, TargetOracle, TitleOracle};
pub use preferences::SplitConfig;

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("interaction history is empty")]
    EmptyHistory,
    #[error("item {0} is not in the catalog")]
    UnknownItem(String),
    #[error("record does not match the user schema: {0}")]
    SchemaMismatch(String),
    #[error("invalid split: k1 + k2 = {0} exceeds 1")]
    InvalidSplit(f64),
    #[error("cannot anonymize {attribute} value {value:?}")]
    UnparseableValue { attribute: String, value: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Changes a stage made to memory, surfaced to observers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryEvent {
    ProfileUpdated,
    FacetsInitialized { count: usize },
    FacetPromoted { facet: PreferenceFacet },
}

/// Attribute map of one target item with its title removed.
pub type TargetInfo = BTreeMap<String, Vec<String>>;

/// Read-only session inputs available to every plugin.
pub struct SessionEnv {
    pub session_id: String,
    pub llm: Arc<dyn ChatBackend>,
    pub catalog: Arc<Catalog>,
    pub templates: Arc<PromptTemplates>,
    pub oracle: Arc<dyn TargetOracle>,
    pub split: SplitConfig,
    /// Attributes anonymized before they reach memory.
    pub sensitive: Vec<String>,
    /// Source-dataset user record for `basic_info`.
    pub raw_user: Option<serde_json::Value>,
    pub target_info: Vec<TargetInfo>,
    /// Recommendation list cap used when judging a CRS recommendation.
    pub max_items: usize,
}

impl SessionEnv {
    pub fn new(session_id: impl Into<String>, llm: Arc<dyn ChatBackend>) -> Self {
        SessionEnv {
            session_id: session_id.into(),
            llm,
            catalog: Arc::new(Catalog::default()),
            templates: Arc::new(PromptTemplates::default()),
            oracle: Arc::new(NoTargets),
            split: SplitConfig::default(),
            sensitive: preferences::default_sensitive(),
            raw_user: None,
            target_info: Vec::new(),
            max_items: 10,
        }
    }
}

pub const SIMULATOR_SYSTEM: &str =
    "You are role-playing a person chatting with a movie recommender. Stay in character and keep replies short.";

/// Persona block shared by the simulator prompts.
pub fn persona_block(memory: &AgentMemory) -> String {
    let profile = &memory.long_term;
    let mut lines = Vec::new();
    if !profile.persona_text.trim().is_empty() {
        lines.push(profile.persona_text.trim().to_string());
    }
    if !profile.taste_summary.trim().is_empty() {
        lines.push(format!("Your long-term taste: {}", profile.taste_summary.trim()));
    }
    lines.join("\n")
}

/// LLM call with the target-title guard and Unknown-facet scrub applied.
pub fn generate(
    env: &SessionEnv,
    facets: &[PreferenceFacet],
    tag: &str,
    prompt: String,
    temperature: f64,
) -> Result<String, PluginError> {
    let request = ChatRequest::new(tag, SIMULATOR_SYSTEM)
        .with_user(prompt)
        .with_temperature(temperature);
    let text = guard::guarded_complete(env.llm.as_ref(), &request, env.oracle.as_ref())?;
    Ok(guard::scrub_unknown(text.trim(), facets))
}

pub const BASIC_INFO: &str = "basic_info";
pub const PREFERENCE_SUMMARY: &str = "preference_summary";
pub const REALTIME_PREFERENCES: &str = "realtime_preferences";
pub const CONVERSATION_OPENER: &str = "conversation_opener";
pub const INTENT_UNDERSTANDING: &str = "intent_understanding";
pub const PERSONALIZED_ASK: &str = "personalized_ask";
pub const NONPERSONALIZED_ASK: &str = "nonpersonalized_ask";
pub const RECOMMEND_RESPONSE: &str = "recommend_response";
pub const CHITCHAT_RESPONSE: &str = "chitchat_response";

/// The standard plugin set with its default priorities.
pub fn default_pipeline_config() -> PipelineConfig {
    let entry = |id: &str, stage: StageId, priority: i32| PluginConfigEntry {
        plugin_id: id.to_string(),
        stage,
        priority,
        enabled: true,
        params: serde_json::Value::Null,
    };
    PipelineConfig {
        plugins: vec![
            entry(BASIC_INFO, StageId::UserProfileInit, 10),
            entry(PREFERENCE_SUMMARY, StageId::UserProfileInit, 20),
            entry(REALTIME_PREFERENCES, StageId::PreferencesInit, 10),
            entry(CONVERSATION_OPENER, StageId::MessageHandling, 0),
            entry(INTENT_UNDERSTANDING, StageId::MessageHandling, 10),
            entry(PERSONALIZED_ASK, StageId::MessageHandling, 20),
            entry(NONPERSONALIZED_ASK, StageId::MessageHandling, 30),
            entry(RECOMMEND_RESPONSE, StageId::MessageHandling, 40),
            entry(CHITCHAT_RESPONSE, StageId::MessageHandling, 50),
        ],
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PluginConfigError {
    #[error("unknown plugin id {0:?}")]
    UnknownPlugin(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn temperature_param(params: &serde_json::Value) -> f64 {
    params
        .get("temperature")
        .and_then(serde_json::Value::as_f64)
        .unwrap_or(GENERATE_TEMPERATURE)
}

/// Built-in plugin and its default activation for a plugin id.
pub fn builtin_plugin(
    plugin_id: &str,
    params: &serde_json::Value,
) -> Option<(Arc<dyn Plugin>, Activation)> {
    use crate::domain::IntentKind;
    let temperature = temperature_param(params);
    let made: (Arc<dyn Plugin>, Activation) = match plugin_id {
        BASIC_INFO => (
            Arc::new(profile::BasicInfoPlugin),
            Activation::predicate(|ctx| ctx.env.raw_user.is_some()),
        ),
        PREFERENCE_SUMMARY => (
            Arc::new(profile::PreferenceSummaryPlugin { temperature }),
            Activation::predicate(|ctx| !ctx.memory.long_term.interaction_history.is_empty()),
        ),
        REALTIME_PREFERENCES => (Arc::new(preferences::RealtimePreferencePlugin), Activation::Always),
        CONVERSATION_OPENER => (
            Arc::new(respond::OpenerPlugin { temperature }),
            Activation::NoMessage,
        ),
        INTENT_UNDERSTANDING => (Arc::new(intent::IntentPlugin), Activation::CrsMessage),
        PERSONALIZED_ASK => (
            Arc::new(respond::PersonalizedAskPlugin { temperature }),
            Activation::Intent(IntentKind::Ask),
        ),
        NONPERSONALIZED_ASK => (
            Arc::new(respond::NonPersonalizedAskPlugin { temperature }),
            Activation::Intent(IntentKind::Ask),
        ),
        RECOMMEND_RESPONSE => (
            Arc::new(respond::RecommendResponsePlugin { temperature }),
            Activation::Intent(IntentKind::Recommend),
        ),
        CHITCHAT_RESPONSE => (
            Arc::new(respond::ChitChatPlugin { temperature }),
            Activation::Intent(IntentKind::ChitChat),
        ),
        _ => return None,
    };
    Some(made)
}

/// Builds a pipeline from a plugin configuration. Disabled entries are
/// skipped; stages other than the three built-in ones are created on demand.
pub fn build_pipeline(config: &PipelineConfig) -> Result<PluginPipeline, PluginConfigError> {
    let mut pipeline = PluginPipeline::new();
    for entry in config.plugins.iter().filter(|e| e.enabled) {
        let (body, activation) = builtin_plugin(&entry.plugin_id, &entry.params)
            .ok_or_else(|| PluginConfigError::UnknownPlugin(entry.plugin_id.clone()))?;
        pipeline.add_stage(entry.stage.clone());
        pipeline.register_arc(
            PluginDescriptor::new(&entry.plugin_id, entry.stage.clone(), entry.priority)
                .when(activation),
            body,
        )?;
    }
    Ok(pipeline)
}

pub fn default_pipeline() -> PluginPipeline {
    build_pipeline(&default_pipeline_config()).expect("default plugin set is valid")
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::llm::{ScriptFile, ScriptedBackend};

    pub fn env() -> SessionEnv {
        let backend = ScriptedBackend::new(ScriptFile::default()).unwrap();
        SessionEnv::new("test", Arc::new(backend))
    }

    pub fn env_with(script: &str) -> (SessionEnv, Arc<ScriptedBackend>) {
        let script: ScriptFile = serde_json::from_str(script).unwrap();
        let backend = Arc::new(ScriptedBackend::new(script).unwrap());
        (SessionEnv::new("test", backend.clone()), backend)
    }
}
