//! Plugin manager: named stages, priority-ordered plugin chains, and
//! handled-flag fallback.
//!
//! A stage run walks its plugins in `(priority, plugin_id)` order, skipping
//! those whose activation predicate is false. A plugin that returns
//! [`PluginFlow::Handled`] ends the stage. If a plugin fails, the memory and
//! context are restored to their pre-stage snapshot and the error is
//! returned.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentMemory, Intent, IntentKind, Message, Role};
use crate::plugins::{MemoryEvent, PluginError, SessionEnv};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    UserProfileInit,
    PreferencesInit,
    MessageHandling,
    Custom(String),
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageId::UserProfileInit => f.write_str("user_profile_init"),
            StageId::PreferencesInit => f.write_str("preferences_init"),
            StageId::MessageHandling => f.write_str("message_handling"),
            StageId::Custom(name) => f.write_str(name),
        }
    }
}

/// Mutable state handed to each plugin of one stage invocation.
pub struct PluginContext<'a> {
    pub env: &'a SessionEnv,
    pub memory: &'a mut AgentMemory,
    pub last_message: Option<Message>,
    pub intent: Option<Intent>,
    /// Reply text produced by the plugin that handled the stage.
    pub response: Option<String>,
    pub events: Vec<MemoryEvent>,
    /// Inter-plugin handoff, cleared around every stage invocation.
    pub scratch: BTreeMap<String, serde_json::Value>,
}

impl<'a> PluginContext<'a> {
    pub fn new(env: &'a SessionEnv, memory: &'a mut AgentMemory) -> Self {
        PluginContext {
            env,
            memory,
            last_message: None,
            intent: None,
            response: None,
            events: Vec::new(),
            scratch: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PluginFlow {
    Continue,
    Handled,
}

pub trait Plugin: Send + Sync {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError>;
}

impl<F> Plugin for F
where
    F: Fn(&mut PluginContext<'_>) -> Result<PluginFlow, PluginError> + Send + Sync,
{
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        self(ctx)
    }
}

type Predicate = Arc<dyn Fn(&PluginContext<'_>) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Activation {
    Always,
    /// Runs when the classified intent has this kind.
    Intent(IntentKind),
    /// Runs when the stage received a CRS message.
    CrsMessage,
    /// Runs when there is no incoming message (conversation opener).
    NoMessage,
    Predicate(Predicate),
}

impl Activation {
    pub fn predicate<F>(f: F) -> Self
    where
        F: Fn(&PluginContext<'_>) -> bool + Send + Sync + 'static,
    {
        Activation::Predicate(Arc::new(f))
    }

    fn holds(&self, ctx: &PluginContext<'_>) -> bool {
        match self {
            Activation::Always => true,
            Activation::Intent(kind) => ctx.intent.as_ref().is_some_and(|i| i.kind() == *kind),
            Activation::CrsMessage => ctx.last_message.as_ref().is_some_and(|m| m.role == Role::Crs),
            Activation::NoMessage => ctx.last_message.is_none(),
            Activation::Predicate(p) => p(ctx),
        }
    }
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Always => f.write_str("Always"),
            Activation::Intent(k) => write!(f, "Intent({k:?})"),
            Activation::CrsMessage => f.write_str("CrsMessage"),
            Activation::NoMessage => f.write_str("NoMessage"),
            Activation::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PluginDescriptor {
    pub plugin_id: String,
    pub stage: StageId,
    /// Lower runs first.
    pub priority: i32,
    pub activation: Activation,
}

impl PluginDescriptor {
    pub fn new(plugin_id: impl Into<String>, stage: StageId, priority: i32) -> Self {
        PluginDescriptor {
            plugin_id: plugin_id.into(),
            stage,
            priority,
            activation: Activation::Always,
        }
    }

    pub fn when(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationHandle {
    stage: StageId,
    plugin_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("plugin {plugin_id:?} already registered in stage {stage}")]
    DuplicatePlugin { stage: StageId, plugin_id: String },
    #[error("unknown stage {0}")]
    UnknownStage(StageId),
    #[error("plugin {plugin_id:?} failed: {cause}")]
    PluginFailure {
        plugin_id: String,
        #[source]
        cause: PluginError,
    },
}

struct Registered {
    descriptor: PluginDescriptor,
    body: Arc<dyn Plugin>,
}

/// What happened during one stage invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageRun {
    /// Plugins that actually ran, in order.
    pub invoked: Vec<String>,
    pub handled_by: Option<String>,
}

pub struct PluginPipeline {
    stages: BTreeMap<StageId, Vec<Registered>>,
}

impl Default for PluginPipeline {
    fn default() -> Self {
        Self::new()
    }
}

impl PluginPipeline {
    /// A pipeline with the three built-in stages and no plugins.
    pub fn new() -> Self {
        let mut stages = BTreeMap::new();
        for stage in [
            StageId::UserProfileInit,
            StageId::PreferencesInit,
            StageId::MessageHandling,
        ] {
            stages.insert(stage, Vec::new());
        }
        PluginPipeline { stages }
    }

    /// Adds an extra stage. Existing stages are left as they are.
    pub fn add_stage(&mut self, stage: StageId) {
        self.stages.entry(stage).or_default();
    }

    pub fn has_stage(&self, stage: &StageId) -> bool {
        self.stages.contains_key(stage)
    }

    pub fn register(
        &mut self,
        descriptor: PluginDescriptor,
        body: impl Plugin + 'static,
    ) -> Result<RegistrationHandle, PipelineError> {
        self.register_arc(descriptor, Arc::new(body))
    }

    pub fn register_arc(
        &mut self,
        descriptor: PluginDescriptor,
        body: Arc<dyn Plugin>,
    ) -> Result<RegistrationHandle, PipelineError> {
        let chain = self
            .stages
            .get_mut(&descriptor.stage)
            .ok_or_else(|| PipelineError::UnknownStage(descriptor.stage.clone()))?;
        if chain.iter().any(|r| r.descriptor.plugin_id == descriptor.plugin_id) {
            return Err(PipelineError::DuplicatePlugin {
                stage: descriptor.stage.clone(),
                plugin_id: descriptor.plugin_id.clone(),
            });
        }
        let handle = RegistrationHandle {
            stage: descriptor.stage.clone(),
            plugin_id: descriptor.plugin_id.clone(),
        };
        chain.push(Registered { descriptor, body });
        chain.sort_by(|a, b| {
            (a.descriptor.priority, &a.descriptor.plugin_id)
                .cmp(&(b.descriptor.priority, &b.descriptor.plugin_id))
        });
        Ok(handle)
    }

    /// Removes a plugin. Returns false if it was already gone.
    pub fn unregister(&mut self, handle: &RegistrationHandle) -> bool {
        let Some(chain) = self.stages.get_mut(&handle.stage) else {
            return false;
        };
        let before = chain.len();
        chain.retain(|r| r.descriptor.plugin_id != handle.plugin_id);
        chain.len() != before
    }

    /// Plugin ids of `stage` in execution order.
    pub fn order(&self, stage: &StageId) -> Vec<String> {
        self.stages
            .get(stage)
            .map(|chain| chain.iter().map(|r| r.descriptor.plugin_id.clone()).collect())
            .unwrap_or_default()
    }

    pub fn run_stage(
        &self,
        stage: &StageId,
        ctx: &mut PluginContext<'_>,
    ) -> Result<StageRun, PipelineError> {
        let chain = self
            .stages
            .get(stage)
            .ok_or_else(|| PipelineError::UnknownStage(stage.clone()))?;

        let memory_snapshot = ctx.memory.clone();
        let intent_snapshot = ctx.intent.clone();
        let response_snapshot = ctx.response.clone();
        let events_len = ctx.events.len();
        ctx.scratch.clear();

        let mut run = StageRun::default();
        for registered in chain {
            if !registered.descriptor.activation.holds(ctx) {
                continue;
            }
            let plugin_id = &registered.descriptor.plugin_id;
            run.invoked.push(plugin_id.clone());
            match registered.body.run(ctx) {
                Ok(PluginFlow::Continue) => {}
                Ok(PluginFlow::Handled) => {
                    run.handled_by = Some(plugin_id.clone());
                    break;
                }
                Err(cause) => {
                    *ctx.memory = memory_snapshot;
                    ctx.intent = intent_snapshot;
                    ctx.response = response_snapshot;
                    ctx.events.truncate(events_len);
                    ctx.scratch.clear();
                    return Err(PipelineError::PluginFailure {
                        plugin_id: plugin_id.clone(),
                        cause,
                    });
                }
            }
        }
        ctx.scratch.clear();
        Ok(run)
    }
}

/// One entry of the plugin configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginConfigEntry {
    pub plugin_id: String,
    pub stage: StageId,
    pub priority: i32,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
    #[serde(default)]
    pub params: serde_json::Value,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plugins: Vec<PluginConfigEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plugins::testing::env;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn noop(_: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        Ok(PluginFlow::Continue)
    }

    #[test]
    fn priority_orders_execution() {
        let mut p = PluginPipeline::new();
        p.register(PluginDescriptor::new("plugin_6", StageId::MessageHandling, 20), noop)
            .unwrap();
        p.register(PluginDescriptor::new("plugin_5", StageId::MessageHandling, 10), noop)
            .unwrap();
        assert_eq!(p.order(&StageId::MessageHandling), vec!["plugin_5", "plugin_6"]);
    }

    #[test]
    fn duplicate_and_unknown_stage() {
        let mut p = PluginPipeline::new();
        p.register(PluginDescriptor::new("a", StageId::MessageHandling, 1), noop)
            .unwrap();
        assert!(matches!(
            p.register(PluginDescriptor::new("a", StageId::MessageHandling, 2), noop),
            Err(PipelineError::DuplicatePlugin { .. })
        ));
        assert!(matches!(
            p.register(PluginDescriptor::new("b", StageId::Custom("x".into()), 1), noop),
            Err(PipelineError::UnknownStage(_))
        ));
        p.add_stage(StageId::Custom("x".into()));
        p.register(PluginDescriptor::new("b", StageId::Custom("x".into()), 1), noop)
            .unwrap();
    }

    #[test]
    fn unregister_restores_prior_behavior() {
        let mut p = PluginPipeline::new();
        let h = p
            .register(PluginDescriptor::new("a", StageId::MessageHandling, 1), noop)
            .unwrap();
        assert!(p.unregister(&h));
        assert!(p.order(&StageId::MessageHandling).is_empty());
        assert!(!p.unregister(&h));
    }

    #[test]
    fn handled_short_circuits() {
        let later = Arc::new(AtomicUsize::new(0));
        let mut p = PluginPipeline::new();
        p.register(
            PluginDescriptor::new("first", StageId::MessageHandling, 1),
            |ctx: &mut PluginContext<'_>| {
                ctx.response = Some("done".into());
                Ok(PluginFlow::Handled)
            },
        )
        .unwrap();
        let counter = later.clone();
        p.register(
            PluginDescriptor::new("second", StageId::MessageHandling, 2),
            move |_: &mut PluginContext<'_>| {
                counter.fetch_add(1, Ordering::SeqCst);
                Ok(PluginFlow::Handled)
            },
        )
        .unwrap();
        let env = env();
        let mut memory = AgentMemory::default();
        let mut ctx = PluginContext::new(&env, &mut memory);
        let run = p.run_stage(&StageId::MessageHandling, &mut ctx).unwrap();
        assert_eq!(run.handled_by.as_deref(), Some("first"));
        assert_eq!(later.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn empty_stage_leaves_context_unchanged() {
        let p = PluginPipeline::new();
        let env = env();
        let mut memory = AgentMemory::default();
        memory.long_term.taste_summary = "x".into();
        let before = memory.clone();
        let mut ctx = PluginContext::new(&env, &mut memory);
        let run = p.run_stage(&StageId::PreferencesInit, &mut ctx).unwrap();
        assert_eq!(run, StageRun::default());
        assert!(ctx.response.is_none());
        assert_eq!(*ctx.memory, before);
    }

    #[test]
    fn failure_rolls_back_memory() {
        let mut p = PluginPipeline::new();
        p.register(
            PluginDescriptor::new("writer", StageId::PreferencesInit, 1),
            |ctx: &mut PluginContext<'_>| {
                ctx.memory.long_term.taste_summary = "partial".into();
                ctx.scratch.insert("k".into(), serde_json::json!(1));
                Ok(PluginFlow::Continue)
            },
        )
        .unwrap();
        p.register(
            PluginDescriptor::new("boom", StageId::PreferencesInit, 2),
            |_: &mut PluginContext<'_>| Err(PluginError::Precondition("nope".into())),
        )
        .unwrap();
        let env = env();
        let mut memory = AgentMemory::default();
        let before = memory.clone();
        let mut ctx = PluginContext::new(&env, &mut memory);
        let err = p.run_stage(&StageId::PreferencesInit, &mut ctx).unwrap_err();
        assert!(matches!(err, PipelineError::PluginFailure { ref plugin_id, .. } if plugin_id == "boom"));
        assert!(ctx.scratch.is_empty());
        assert_eq!(*ctx.memory, before);
    }

    #[test]
    fn inactive_plugins_are_skipped() {
        let mut p = PluginPipeline::new();
        p.register(
            PluginDescriptor::new("ask_only", StageId::MessageHandling, 1)
                .when(Activation::Intent(IntentKind::Ask)),
            |_: &mut PluginContext<'_>| Ok(PluginFlow::Handled),
        )
        .unwrap();
        let env = env();
        let mut memory = AgentMemory::default();
        let mut ctx = PluginContext::new(&env, &mut memory);
        ctx.intent = Some(Intent::ChitChat);
        let run = p.run_stage(&StageId::MessageHandling, &mut ctx).unwrap();
        assert!(run.invoked.is_empty());
    }
}
