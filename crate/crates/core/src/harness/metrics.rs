//! Recall@k, SR@t and average turns, with leakage-filtered variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DenominatorPolicy, FailureTurns, SessionRecord};
use crate::domain::{Role, SessionState};
use crate::plugins::{TargetOracle, TitleOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    MinusHistory,
    MinusResponse,
    /// Drops successes with either kind of leak (`-both`, `-leakage`).
    MinusBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Raw,
        Variant::MinusHistory,
        Variant::MinusResponse,
        Variant::MinusBoth,
    ];

    fn voids(self, o: &Outcome) -> bool {
        match self {
            Variant::Raw => false,
            Variant::MinusHistory => o.history_leak,
            Variant::MinusResponse => o.response_leak,
            Variant::MinusBoth => o.history_leak || o.response_leak,
        }
    }
}

/// What the metrics need from one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Outcome {
    /// CRS round of the first target hit.
    pub success_turn: Option<u32>,
    /// Best 1-based position of a target over all recommendation lists.
    pub best_rank: Option<usize>,
    pub history_leak: bool,
    pub response_leak: bool,
    pub errored: bool,
}

impl Outcome {
    pub fn from_record(record: &SessionRecord) -> Self {
        Outcome {
            success_turn: record.state.status.success_turn(),
            best_rank: target_rank(&record.state),
            history_leak: record.state.leakage.history_leak,
            response_leak: record.state.leakage.response_leak,
            errored: record.error.is_some(),
        }
    }
}

/// Best position of a target item in any recommendation made after the
/// annotated prefix.
pub fn target_rank(state: &SessionState) -> Option<usize> {
    let oracle = TitleOracle::new(&state.target_items);
    state.transcript[state.seed_prefix_len.min(state.transcript.len())..]
        .iter()
        .filter(|m| m.role == Role::Crs)
        .filter_map(|m| m.recommended_items.as_ref())
        .filter_map(|items| items.iter().position(|i| oracle.is_target(i)).map(|p| p + 1))
        .min()
}

/// Shared fold: `hit` says whether a session counts as a success for the
/// metric at hand. Returns (successes, denominator).
fn tally(
    outcomes: &[Outcome],
    variant: Variant,
    policy: DenominatorPolicy,
    hit: impl Fn(&Outcome) -> bool,
) -> (usize, usize) {
    let mut successes = 0;
    let mut denominator = 0;
    for o in outcomes.iter().filter(|o| !o.errored) {
        let h = hit(o);
        if h && variant.voids(o) {
            if policy == DenominatorPolicy::NumeratorOnly {
                denominator += 1;
            }
            continue;
        }
        denominator += 1;
        if h {
            successes += 1;
        }
    }
    (successes, denominator)
}

fn ratio((num, den): (usize, usize)) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn recall_at_k(
    outcomes: &[Outcome],
    k: usize,
    variant: Variant,
    policy: DenominatorPolicy,
) -> Option<f64> {
    ratio(tally(outcomes, variant, policy, |o| o.best_rank.is_some_and(|r| r <= k)))
}

pub fn sr_at_t(
    outcomes: &[Outcome],
    t: u32,
    variant: Variant,
    policy: DenominatorPolicy,
) -> Option<f64> {
    ratio(tally(outcomes, variant, policy, |o| o.success_turn.is_some_and(|s| s <= t)))
}

/// Mean rounds per session; a failure (or voided success) counts as
/// `max_turns` unless `failures` is `Exclude`.
pub fn average_turns(
    outcomes: &[Outcome],
    max_turns: u32,
    variant: Variant,
    policy: DenominatorPolicy,
    failures: FailureTurns,
) -> Option<f64> {
    let mut total = 0u64;
    let mut count = 0u64;
    for o in outcomes.iter().filter(|o| !o.errored) {
        let voided = o.success_turn.is_some() && variant.voids(o);
        if voided && policy == DenominatorPolicy::Shrink {
            continue;
        }
        match o.success_turn.filter(|_| !voided) {
            Some(t) => {
                total += u64::from(t);
                count += 1;
            }
            None if failures == FailureTurns::MaxTurns => {
                total += u64::from(max_turns);
                count += 1;
            }
            None => {}
        }
    }
    (count > 0).then(|| total as f64 / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub n_sessions: usize,
    pub recall_at_k: BTreeMap<usize, Option<f64>>,
    pub sr_at_t: BTreeMap<u32, Option<f64>>,
    pub average_turns: Option<f64>,
}

pub fn metrics_report(
    outcomes: &[Outcome],
    variant: Variant,
    k_values: &[usize],
    max_turns: u32,
    policy: DenominatorPolicy,
    failures: FailureTurns,
) -> MetricsReport {
    MetricsReport {
        variant,
        n_sessions: outcomes.iter().filter(|o| !o.errored).count(),
        recall_at_k: k_values
            .iter()
            .map(|&k| (k, recall_at_k(outcomes, k, variant, policy)))
            .collect(),
        sr_at_t: (1..=max_turns)
            .map(|t| (t, sr_at_t(outcomes, t, variant, policy)))
            .collect(),
        average_turns: average_turns(outcomes, max_turns, variant, policy, failures),
    }
}
