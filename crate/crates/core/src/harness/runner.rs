use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::json;
use tracing::warn;

use super::engine::{RunContext, SessionEngine};
use super::{HarnessError, ScenarioConfig, SessionRecord, SessionSpec};
use crate::dataset::Dataset;
use crate::domain::{
    AgentMemory, Catalog, LeakageFlags, RatingRecord, SessionState, SessionStatus, UserId,
};

/// One session per held-out rating: each user's latest `holdout` ratings
/// (by timestamp, then item id) become targets, earlier ones the history.
pub fn plan_fresh(
    data: &Dataset,
    catalog: &Catalog,
    holdout: usize,
) -> Result<Vec<SessionSpec>, HarnessError> {
    let mut by_user: BTreeMap<&UserId, Vec<&RatingRecord>> = BTreeMap::new();
    for r in &data.ratings {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let mut specs = Vec::new();
    for (user, mut ratings) in by_user {
        ratings.sort_by(|a, b| {
            a.timestamp
                .unwrap_or(i64::MIN)
                .cmp(&b.timestamp.unwrap_or(i64::MIN))
                .then_with(|| a.item_id.cmp(&b.item_id))
        });
        let cut = ratings.len().saturating_sub(holdout);
        let history: Vec<RatingRecord> = ratings[..cut].iter().map(|r| (*r).clone()).collect();
        for held in &ratings[cut..] {
            let target = catalog.get(&held.item_id).ok_or_else(|| {
                HarnessError::Invalid(format!("rated item {} is not in the catalog", held.item_id))
            })?;
            let raw_user = json!({
                "user_id": user.0,
                "ratings": history.iter().map(|r| json!({
                    "item_id": r.item_id.0, "rating": r.rating, "timestamp": r.timestamp
                })).collect::<Vec<_>>(),
            });
            specs.push(SessionSpec {
                session_id: format!("{}-{}", user, held.item_id),
                user_id: user.clone(),
                targets: vec![target.clone()],
                seed_turns: Vec::new(),
                history: history.clone(),
                raw_user: Some(raw_user),
                persona: String::new(),
            });
        }
    }
    Ok(specs)
}

/// One session per annotated conversation with at least one known target.
pub fn plan_annotated(data: &Dataset, catalog: &Catalog) -> Result<Vec<SessionSpec>, HarnessError> {
    let mut specs = Vec::new();
    for conv in &data.conversations {
        let targets: Vec<_> = conv
            .target_item_ids
            .iter()
            .filter_map(|id| catalog.get(id).cloned())
            .collect();
        if targets.is_empty() {
            warn!(conversation = %conv.conversation_id, "no resolvable targets, skipped");
            continue;
        }
        specs.push(SessionSpec {
            session_id: conv.conversation_id.clone(),
            user_id: UserId(conv.conversation_id.clone()),
            targets,
            seed_turns: conv.turns.clone(),
            history: Vec::new(),
            raw_user: None,
            persona: String::new(),
        });
    }
    Ok(specs)
}

fn run_one(ctx: &RunContext, cfg: &ScenarioConfig, spec: SessionSpec) -> SessionRecord {
    let fallback = SessionState {
        session_id: spec.session_id.clone(),
        target_items: spec.targets.clone(),
        memory: AgentMemory::default(),
        transcript: Vec::new(),
        seed_prefix_len: 0,
        status: SessionStatus::Ongoing,
        leakage: LeakageFlags::default(),
        rng_seed: super::session_seed(cfg.seed, &spec.session_id),
        max_turns: cfg.max_turns,
    };
    let mut engine = match SessionEngine::start(ctx, cfg, spec) {
        Ok(e) => e,
        Err(e) => {
            warn!(session = %fallback.session_id, error = %e, "session failed to start");
            return SessionRecord {
                state: fallback,
                error: Some(e.to_string()),
            };
        }
    };
    let result = engine.run_to_end();
    let state = engine.finish();
    let error = result.err().map(|e| {
        warn!(session = %state.session_id, error = %e, "session failed");
        e.to_string()
    });
    SessionRecord { state, error }
}

/// Runs every session on a pool of `cfg.workers` threads. Output order
/// follows input order.
pub fn run_sessions(ctx: &RunContext, cfg: &ScenarioConfig, specs: Vec<SessionSpec>) -> Vec<SessionRecord> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .expect("thread pool");
    let records: Vec<SessionRecord> =
        pool.install(|| specs.into_par_iter().map(|spec| run_one(ctx, cfg, spec)).collect());
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        warn!(failed, total = records.len(), "sessions ended with errors");
    }
    records
}
