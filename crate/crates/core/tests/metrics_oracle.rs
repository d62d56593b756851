//! Metrics against brute-force recounts on random session fixtures.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cshi_core::domain::{LeakKind, Message, RecommendedItem, Role};
use cshi_core::harness::{
    audit_leakage, average_turns, recall_at_k, sr_at_t, target_rank, DenominatorPolicy,
    FailureTurns, Outcome, Variant,
};

use common::oracle::{brute_at, brute_recall, brute_scan, brute_sr, injected_session, random_outcomes};

const N: DenominatorPolicy = DenominatorPolicy::NumeratorOnly;

#[test]
fn metrics_equal_brute_force_on_200_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let max_turns = rng.gen_range(1..=12);
        let outcomes = random_outcomes(&mut rng, max_turns);
        for v in Variant::ALL {
            for k in [1, 10, 50] {
                assert_eq!(recall_at_k(&outcomes, k, v, N), brute_recall(&outcomes, k, v));
            }
            let mut prev = 0.0;
            for t in 1..=max_turns {
                let sr = sr_at_t(&outcomes, t, v, N);
                assert_eq!(sr, brute_sr(&outcomes, t, v));
                let sr = sr.unwrap_or(0.0);
                assert!(sr >= prev && (0.0..=1.0).contains(&sr));
                prev = sr;
            }
            let at = average_turns(&outcomes, max_turns, v, N, FailureTurns::MaxTurns);
            assert_eq!(at, brute_at(&outcomes, max_turns, v));
            if let Some(at) = at {
                assert!((1.0..=max_turns as f64).contains(&at));
            }
            let r: Vec<f64> = [1, 10, 50]
                .iter()
                .map(|&k| recall_at_k(&outcomes, k, v, N).unwrap_or(0.0))
                .collect();
            assert!(r[0] <= r[1] && r[1] <= r[2]);
        }
    }
}

#[test]
fn hand_computed_examples() {
    let s = |t| Outcome {
        success_turn: Some(t),
        best_rank: Some(1),
        ..Outcome::default()
    };
    let fail = Outcome::default();
    let o = vec![s(2), s(4), fail];
    assert_eq!(sr_at_t(&o, 3, Variant::Raw, N), Some(1.0 / 3.0));
    assert_eq!(sr_at_t(&o, 5, Variant::Raw, N), Some(2.0 / 3.0));
    assert_eq!(average_turns(&o, 10, Variant::Raw, N, FailureTurns::MaxTurns), Some(16.0 / 3.0));
    assert_eq!(average_turns(&o, 10, Variant::Raw, N, FailureTurns::Exclude), Some(3.0));

    let all_first = vec![s(1); 5];
    assert_eq!(sr_at_t(&all_first, 1, Variant::Raw, N), Some(1.0));
    assert_eq!(average_turns(&all_first, 10, Variant::Raw, N, FailureTurns::MaxTurns), Some(1.0));

    let mut ten = vec![Outcome::default(); 10];
    for o in ten.iter_mut().take(3) {
        o.best_rank = Some(4);
    }
    for v in Variant::ALL {
        assert_eq!(recall_at_k(&ten, 10, v, N), Some(0.3));
    }
    ten[0].history_leak = true;
    assert_eq!(recall_at_k(&ten, 10, Variant::Raw, N), Some(0.3));
    assert_eq!(recall_at_k(&ten, 10, Variant::MinusHistory, N), Some(0.2));
    assert_eq!(
        recall_at_k(&ten, 10, Variant::MinusHistory, DenominatorPolicy::Shrink),
        Some(2.0 / 9.0)
    );
}

#[test]
fn filtered_variants_never_exceed_raw() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let outcomes = random_outcomes(&mut rng, 10);
        for policy in [DenominatorPolicy::NumeratorOnly, DenominatorPolicy::Shrink] {
            for k in [1, 10, 50] {
                let r = |v| recall_at_k(&outcomes, k, v, policy).unwrap_or(0.0);
                let (raw, h, resp, both) = (
                    r(Variant::Raw),
                    r(Variant::MinusHistory),
                    r(Variant::MinusResponse),
                    r(Variant::MinusBoth),
                );
                assert!(both <= h.min(resp) + 1e-12 && h.max(resp) <= raw + 1e-12);
            }
        }
    }
}

#[test]
fn audit_evidence_equals_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let state = injected_session(&mut rng);
        let flags = audit_leakage(&state);
        let (h, r) = brute_scan(&state);
        let count = |k| flags.evidence.iter().filter(|e| e.kind == k).count();
        assert_eq!((count(LeakKind::History), count(LeakKind::Response)), (h, r));
        assert_eq!(flags.history_leak, h > 0);
        assert_eq!(flags.response_leak, r > 0);
    }
}

#[test]
fn target_rank_is_best_position_over_lists() {
    let mut state = injected_session(&mut ChaCha8Rng::seed_from_u64(1));
    state.transcript.clear();
    state.seed_prefix_len = 0;
    let list = |titles: &[&str]| Message {
        role: Role::Crs,
        text: String::new(),
        turn: 0,
        recommended_items: Some(
            titles
                .iter()
                .map(|t| RecommendedItem {
                    item_id: None,
                    title: t.to_string(),
                })
                .collect(),
        ),
    };
    state.transcript.push(list(&["a", "b", "c", "Harbor Of Bells (2010)"]));
    state.transcript.push(list(&["Harbor Of Bells", "z"]));
    assert_eq!(target_rank(&state), Some(1));
    state.transcript.pop();
    assert_eq!(target_rank(&state), Some(4));
}
