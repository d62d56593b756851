use std::collections::BTreeMap;
use std::sync::Arc;

use super::baseline::single_prompt_reply;
use super::{session_seed, HarnessError, Mode, ScenarioConfig, SessionSpec, SimulatorKind};
use crate::crs::{CrsAdapter, CrsFactory, CrsKind};
use crate::domain::{
    AgentMemory, Catalog, LeakageFlags, Message, RecommendedItem, Role, SessionState,
    SessionStatus, UserProfile,
};
use crate::llm::ChatBackend;
use crate::pipeline::{PluginContext, PluginPipeline, StageId};
use crate::plugins::{MemoryEvent, SessionEnv, SplitConfig, TargetInfo, TargetOracle, TitleOracle};
use crate::prompts::PromptTemplates;
use crate::text::contains_title;

/// Shared, read-only inputs of a run.
#[derive(Clone)]
pub struct RunContext {
    pub catalog: Arc<Catalog>,
    pub llm: Arc<dyn ChatBackend>,
    pub templates: Arc<PromptTemplates>,
    pub pipeline: Arc<PluginPipeline>,
    pub crs: CrsFactory,
}

/// Result of one conversation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub message: Message,
    pub events: Vec<MemoryEvent>,
    pub status: SessionStatus,
}

/// Drives one simulator-CRS conversation.
pub struct SessionEngine {
    pub state: SessionState,
    env: SessionEnv,
    pipeline: Arc<PluginPipeline>,
    simulator: SimulatorKind,
    crs: Box<dyn CrsAdapter>,
    history: Vec<crate::domain::RatingRecord>,
}

fn target_info(targets: &[crate::domain::CatalogItem]) -> Vec<TargetInfo> {
    targets
        .iter()
        .map(|t| t.attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>())
        .collect()
}

/// Index of the first recommender turn that names a target; earlier turns
/// form the annotated prefix.
fn prefix_len(spec: &SessionSpec) -> usize {
    let titles: Vec<String> = spec.targets.iter().map(|t| t.normalized_title()).collect();
    spec.seed_turns
        .iter()
        .position(|t| !t.is_user_side() && titles.iter().any(|title| contains_title(&t.text, title)))
        .unwrap_or(spec.seed_turns.len())
}

impl SessionEngine {
    pub fn start(
        ctx: &RunContext,
        cfg: &ScenarioConfig,
        spec: SessionSpec,
    ) -> Result<Self, HarnessError> {
        Self::build(ctx, cfg, spec, true)
    }

    fn build(
        ctx: &RunContext,
        cfg: &ScenarioConfig,
        spec: SessionSpec,
        initialize: bool,
    ) -> Result<Self, HarnessError> {
        if spec.targets.is_empty() {
            return Err(HarnessError::NoTargets(spec.session_id));
        }
        let seed = session_seed(cfg.seed, &spec.session_id);
        let oracle: Arc<dyn TargetOracle> = Arc::new(TitleOracle::new(&spec.targets));
        let mut env = SessionEnv::new(spec.session_id.clone(), ctx.llm.clone());
        env.catalog = ctx.catalog.clone();
        env.templates = ctx.templates.clone();
        env.oracle = oracle.clone();
        env.split = SplitConfig { seed, ..cfg.split };
        if cfg.simulator == SimulatorKind::CshiNofilter {
            env.sensitive.clear();
        }
        env.raw_user = spec.raw_user.clone();
        env.target_info = target_info(&spec.targets);
        env.max_items = cfg.max_items_per_rec;

        let history: Vec<_> = spec
            .history
            .iter()
            .filter(|r| !oracle.is_target_id(&r.item_id))
            .cloned()
            .collect();
        let mut memory = AgentMemory {
            long_term: UserProfile {
                user_id: spec.user_id.clone(),
                persona_text: spec.persona.clone(),
                interaction_history: history.clone(),
                ..UserProfile::default()
            },
            ..AgentMemory::default()
        };

        let prefix = if cfg.mode == Mode::Annotated { prefix_len(&spec) } else { 0 };
        let transcript: Vec<Message> = spec.seed_turns[..prefix]
            .iter()
            .enumerate()
            .map(|(i, t)| Message {
                role: if t.is_user_side() { Role::Human } else { Role::Crs },
                text: t.text.clone(),
                turn: i as u32,
                recommended_items: None,
            })
            .collect();
        memory.dialogue_log = transcript
            .iter()
            .map(|m| Message {
                text: oracle.redact(&m.text),
                ..m.clone()
            })
            .collect();

        let pipeline = ctx.pipeline.clone();
        if initialize && cfg.simulator.uses_pipeline() {
            let mut pctx = PluginContext::new(&env, &mut memory);
            pipeline.run_stage(&StageId::UserProfileInit, &mut pctx)?;
            pipeline.run_stage(&StageId::PreferencesInit, &mut pctx)?;
        }

        let state = SessionState {
            session_id: spec.session_id.clone(),
            target_items: spec.targets.clone(),
            memory,
            transcript,
            seed_prefix_len: prefix,
            status: SessionStatus::Ongoing,
            leakage: LeakageFlags::default(),
            rng_seed: seed,
            max_turns: cfg.max_turns,
        };
        if state.memory.mentions_any(&state.target_titles()) {
            return Err(HarnessError::MemoryLeak);
        }
        let mut crs = (ctx.crs)();
        crs.restore(&state.transcript[state.seed_prefix_len..]);
        Ok(SessionEngine {
            state,
            env,
            pipeline,
            simulator: cfg.simulator,
            crs,
            history,
        })
    }

    /// Rebuilds an engine around a saved state.
    pub fn resume(
        ctx: &RunContext,
        cfg: &ScenarioConfig,
        spec: &SessionSpec,
        state: SessionState,
    ) -> Result<Self, HarnessError> {
        let bare = SessionSpec {
            seed_turns: Vec::new(),
            ..spec.clone()
        };
        let mut engine = Self::build(ctx, cfg, bare, false)?;
        engine.env.split.seed = state.rng_seed;
        engine.crs.restore(&state.transcript[state.seed_prefix_len.min(state.transcript.len())..]);
        engine.state = state;
        Ok(engine)
    }

    pub fn env(&self) -> &SessionEnv {
        &self.env
    }

    pub fn oracle(&self) -> &dyn TargetOracle {
        self.env.oracle.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.state.status.is_terminal()
    }

    /// Whether the next message should come from the user side.
    pub fn user_turn_next(&self) -> bool {
        self.state.transcript.last().is_none_or(|m| m.role == Role::Crs)
    }

    fn append(&mut self, message: Message) {
        let redacted = Message {
            text: self.env.oracle.redact(&message.text),
            recommended_items: None,
            ..message.clone()
        };
        self.state.memory.dialogue_log.push(redacted);
        self.state.transcript.push(message);
    }

    /// One CRS round. Ends the session on a target hit or at the turn cap.
    pub fn crs_turn(&mut self) -> Result<StepOutput, HarnessError> {
        if self.is_finished() {
            return Err(HarnessError::Finished);
        }
        let max_items = self.env.max_items;
        let turn = self
            .crs
            .next_turn(&self.state.session_id, &self.state.transcript, max_items)?;
        let items: Option<Vec<RecommendedItem>> = (turn.kind == CrsKind::Recommend).then(|| {
            turn.items
                .iter()
                .map(|item| RecommendedItem {
                    item_id: item
                        .item_id
                        .clone()
                        .or_else(|| self.env.catalog.by_title(&item.title).map(|c| c.item_id.clone())),
                    title: item.title.clone(),
                })
                .collect()
        });
        let hit = items
            .as_ref()
            .is_some_and(|list| list.iter().take(max_items).any(|i| self.env.oracle.is_target(i)));
        let message = Message {
            role: Role::Crs,
            text: turn.text,
            turn: self.state.next_turn_index(),
            recommended_items: items,
        };
        self.append(message.clone());
        let round = self.state.crs_rounds();
        if hit {
            self.state.status = SessionStatus::Succeeded(round);
        } else if round >= self.state.max_turns {
            self.state.status = SessionStatus::MaxTurnsReached;
        }
        Ok(StepOutput {
            message,
            events: Vec::new(),
            status: self.state.status,
        })
    }

    /// One simulator reply to the latest CRS message, or an opener.
    pub fn simulator_turn(&mut self) -> Result<StepOutput, HarnessError> {
        if self.is_finished() {
            return Err(HarnessError::Finished);
        }
        let last = self.state.transcript.last().filter(|m| m.role == Role::Crs).cloned();
        let (text, events) = if self.simulator.uses_pipeline() {
            let incoming = last.map(|m| Message {
                text: self.env.oracle.redact(&m.text),
                ..m
            });
            let mut pctx = PluginContext::new(&self.env, &mut self.state.memory);
            pctx.last_message = incoming;
            self.pipeline.run_stage(&StageId::MessageHandling, &mut pctx)?;
            let text = pctx.response.take().ok_or(HarnessError::NoResponse)?;
            (text, std::mem::take(&mut pctx.events))
        } else {
            let with_history = self.simulator == SimulatorKind::SinglePromptUi;
            let text = single_prompt_reply(
                &self.env,
                &self.state,
                with_history.then_some(self.history.as_slice()),
            )?;
            (text, Vec::new())
        };
        let message = Message {
            role: Role::Simulator,
            text,
            turn: self.state.next_turn_index(),
            recommended_items: None,
        };
        self.append(message.clone());
        Ok(StepOutput {
            message,
            events,
            status: self.state.status,
        })
    }

    /// A message written by a person in place of the simulator.
    pub fn human_turn(&mut self, text: &str) -> Result<StepOutput, HarnessError> {
        if self.is_finished() {
            return Err(HarnessError::Finished);
        }
        if text.trim().is_empty() {
            return Err(HarnessError::Invalid("empty message".into()));
        }
        let message = Message {
            role: Role::Human,
            text: text.to_string(),
            turn: self.state.next_turn_index(),
            recommended_items: None,
        };
        self.append(message.clone());
        Ok(StepOutput {
            message,
            events: Vec::new(),
            status: self.state.status,
        })
    }

    /// Replaces persona text and/or taste summary, refusing edits that name
    /// a target.
    pub fn edit_profile(
        &mut self,
        persona_text: Option<String>,
        taste_summary: Option<String>,
    ) -> Result<(), HarnessError> {
        for text in persona_text.iter().chain(taste_summary.iter()) {
            if self.env.oracle.leaks(text) {
                return Err(HarnessError::EditLeak);
            }
        }
        if let Some(p) = persona_text {
            self.state.memory.long_term.persona_text = p;
        }
        if let Some(t) = taste_summary {
            self.state.memory.long_term.taste_summary = t;
        }
        Ok(())
    }

    /// Alternates turns until the session ends.
    pub fn run_to_end(&mut self) -> Result<(), HarnessError> {
        while !self.is_finished() {
            if self.user_turn_next() {
                self.simulator_turn()?;
            } else {
                self.crs_turn()?;
            }
        }
        Ok(())
    }

    /// Final state with the leakage audit attached.
    pub fn finish(mut self) -> SessionState {
        self.state.leakage = super::audit_leakage(&self.state);
        self.state
    }
}
