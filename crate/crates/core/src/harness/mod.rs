//! Experiment harness: session engine, leakage audit, metrics and reports.

mod audit;
mod baseline;
mod engine;
mod metrics;
mod report;
mod runner;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crs::CrsError;
use crate::dataset::AnnotatedTurn;
use crate::domain::{CatalogItem, RatingRecord, UserId};
use crate::llm::LlmError;
use crate::pipeline::PipelineError;
use crate::plugins::{PluginError, SplitConfig};
use crate::prompts::TemplateError;

pub use audit::{audit_leakage, audit_records};
pub use baseline::{target_info_text, ui_info_text};
pub use engine::{RunContext, SessionEngine, StepOutput};
pub use metrics::{
    average_turns, metrics_report, recall_at_k, sr_at_t, target_rank, MetricsReport, Outcome,
    Variant,
};
pub use report::{build_report, read_sessions, write_outputs, Report, TurnCount};
pub use runner::{plan_annotated, plan_fresh, run_sessions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Continue human-annotated conversations from their prefix.
    Annotated,
    /// The simulator opens a new conversation per held-out item.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatorKind {
    Cshi,
    /// Plugin pipeline with anonymization of sensitive attributes off.
    CshiNofilter,
    SinglePrompt,
    SinglePromptUi,
}

impl SimulatorKind {
    pub fn uses_pipeline(self) -> bool {
        matches!(self, SimulatorKind::Cshi | SimulatorKind::CshiNofilter)
    }
}

/// How leaked successes affect the denominator of filtered metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorPolicy {
    /// A leaked success counts as a failure.
    #[default]
    NumeratorOnly,
    /// A leaked success is removed from the session set.
    Shrink,
}

/// What a failed session contributes to the average turn count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureTurns {
    #[default]
    MaxTurns,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: Mode,
    /// CRS rounds after the annotated prefix.
    pub max_turns: u32,
    pub k_values: Vec<usize>,
    pub max_items_per_rec: usize,
    pub split: SplitConfig,
    pub simulator: SimulatorKind,
    pub seed: u64,
    #[serde(default)]
    pub denominator: DenominatorPolicy,
    #[serde(default)]
    pub failure_turns: FailureTurns,
    /// Held-out ratings per user in fresh mode.
    pub holdout: usize,
    pub workers: usize,
    pub temperature: f64,
}

impl ScenarioConfig {
    pub fn annotated() -> Self {
        ScenarioConfig {
            mode: Mode::Annotated,
            max_turns: 5,
            k_values: vec![1, 10, 50],
            max_items_per_rec: 50,
            split: SplitConfig::default(),
            simulator: SimulatorKind::Cshi,
            seed: 0,
            denominator: DenominatorPolicy::default(),
            failure_turns: FailureTurns::default(),
            holdout: 5,
            workers: 4,
            temperature: crate::llm::GENERATE_TEMPERATURE,
        }
    }

    pub fn fresh() -> Self {
        ScenarioConfig {
            mode: Mode::Fresh,
            max_turns: 10,
            k_values: vec![1, 5, 10],
            max_items_per_rec: 10,
            ..Self::annotated()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Annotated => Self::annotated(),
            Mode::Fresh => Self::fresh(),
        }
    }
}

/// Everything needed to start one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_id: String,
    pub user_id: UserId,
    pub targets: Vec<CatalogItem>,
    #[serde(default)]
    pub seed_turns: Vec<AnnotatedTurn>,
    #[serde(default)]
    pub history: Vec<RatingRecord>,
    #[serde(default)]
    pub raw_user: Option<serde_json::Value>,
    #[serde(default)]
    pub persona: String,
}

/// A finished (or failed) session as archived in `sessions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub state: crate::domain::SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error("CRS adapter: {0}")]
    Crs(#[from] CrsError),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("session {0} has no target items")]
    NoTargets(String),
    #[error("session is already finished")]
    Finished,
    #[error("no plugin produced a reply")]
    NoResponse,
    #[error("simulator memory mentions a target title")]
    MemoryLeak,
    #[error("edit mentions a target title")]
    EditLeak,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-session seed derived from the run seed and the session id.
pub fn session_seed(run_seed: u64, session_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{run_seed}:{session_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
