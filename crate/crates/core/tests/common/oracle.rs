//! Independent recomputations and fixture generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Value};

use cshi_core::domain::{
    AgentMemory, CatalogItem, ItemId, LeakageFlags, Message, PreferenceFacet, RecommendedItem,
    Role, SessionState, SessionStatus,
};
use cshi_core::harness::{Outcome, Variant};
use cshi_core::plugins::preferences::{anonymize_facet, default_sensitive};

pub fn random_outcomes(rng: &mut ChaCha8Rng, max_turns: u32) -> Vec<Outcome> {
    let n = rng.gen_range(0..40);
    (0..n)
        .map(|_| {
            let success = rng.gen_bool(0.6);
            Outcome {
                success_turn: success.then(|| rng.gen_range(1..=max_turns)),
                best_rank: rng.gen_bool(0.7).then(|| rng.gen_range(1..=60)),
                history_leak: rng.gen_bool(0.2),
                response_leak: rng.gen_bool(0.2),
                errored: rng.gen_bool(0.05),
            }
        })
        .collect()
}

pub fn leaked(o: &Outcome, v: Variant) -> bool {
    match v {
        Variant::Raw => false,
        Variant::MinusHistory => o.history_leak,
        Variant::MinusResponse => o.response_leak,
        Variant::MinusBoth => o.history_leak || o.response_leak,
    }
}

pub fn brute_recall(outcomes: &[Outcome], k: usize, v: Variant) -> Option<f64> {
    let live: Vec<&Outcome> = outcomes.iter().filter(|o| !o.errored).collect();
    if live.is_empty() {
        return None;
    }
    let mut hits = 0;
    for o in &live {
        let hit = matches!(o.best_rank, Some(r) if r <= k);
        if hit && !leaked(o, v) {
            hits += 1;
        }
    }
    Some(hits as f64 / live.len() as f64)
}

pub fn brute_sr(outcomes: &[Outcome], t: u32, v: Variant) -> Option<f64> {
    let live: Vec<&Outcome> = outcomes.iter().filter(|o| !o.errored).collect();
    if live.is_empty() {
        return None;
    }
    let hits = live
        .iter()
        .filter(|o| matches!(o.success_turn, Some(s) if s <= t) && !leaked(o, v))
        .count();
    Some(hits as f64 / live.len() as f64)
}

pub fn brute_at(outcomes: &[Outcome], max_turns: u32, v: Variant) -> Option<f64> {
    let turns: Vec<u32> = outcomes
        .iter()
        .filter(|o| !o.errored)
        .map(|o| match o.success_turn {
            Some(t) if !leaked(o, v) => t,
            _ => max_turns,
        })
        .collect();
    if turns.is_empty() {
        return None;
    }
    Some(turns.iter().map(|&t| t as u64).sum::<u64>() as f64 / turns.len() as f64)
}

const WORDS: [&str; 8] = ["i", "really", "liked", "that", "one", "about", "ships", "tonight"];
pub const TITLES: [&str; 3] = ["Harbor Of Bells", "Saltwind", "The Copper Orchard"];

fn item(i: usize) -> CatalogItem {
    CatalogItem {
        item_id: ItemId(format!("x{i}")),
        title: TITLES[i].to_string(),
        year: None,
        attributes: Default::default(),
    }
}

/// Random finished session with titles spliced into some messages and
/// random recommendation lists on CRS turns.
pub fn injected_session(rng: &mut ChaCha8Rng) -> SessionState {
    let targets: Vec<CatalogItem> = (0..rng.gen_range(1..=2)).map(item).collect();
    let n = rng.gen_range(2..14);
    let prefix = rng.gen_range(0..n);
    let transcript: Vec<Message> = (0..n)
        .map(|i| {
            let role = match rng.gen_range(0..3) {
                0 => Role::Crs,
                1 => Role::Human,
                _ => Role::Simulator,
            };
            let mut words: Vec<String> = (0..rng.gen_range(1..8))
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
                .collect();
            for _ in 0..rng.gen_range(0..3) {
                let t = TITLES[rng.gen_range(0..TITLES.len())];
                let at = rng.gen_range(0..=words.len());
                words.insert(at, format!("{t}!"));
            }
            let recommended_items = (role == Role::Crs && i >= prefix && rng.gen_bool(0.6)).then(|| {
                (0..rng.gen_range(1..60))
                    .map(|j| RecommendedItem {
                        item_id: None,
                        title: if rng.gen_bool(0.03) {
                            TITLES[rng.gen_range(0..TITLES.len())].to_string()
                        } else {
                            format!("Filler {j}")
                        },
                    })
                    .collect()
            });
            Message {
                role,
                text: words.join(" "),
                turn: i as u32,
                recommended_items,
            }
        })
        .collect();
    let hit_round = transcript[prefix..]
        .iter()
        .filter(|m| m.role == Role::Crs)
        .position(|m| {
            m.recommended_items.as_ref().is_some_and(|l| {
                l.iter().any(|it| targets.iter().any(|t| t.title == it.title))
            })
        });
    SessionState {
        session_id: format!("inj-{}", rng.gen::<u32>()),
        target_items: targets,
        memory: AgentMemory::default(),
        transcript,
        seed_prefix_len: prefix,
        status: hit_round.map_or(SessionStatus::MaxTurnsReached, |r| SessionStatus::Succeeded(r as u32 + 1)),
        leakage: LeakageFlags::default(),
        rng_seed: 0,
        max_turns: 10,
    }
}

/// (history, response) title hits found by a plain substring scan.
pub fn brute_scan(state: &SessionState) -> (usize, usize) {
    let (mut history, mut response) = (0, 0);
    for (i, m) in state.transcript.iter().enumerate() {
        let text = m.text.to_lowercase().replace(['!', '.', ','], " ");
        let text = format!(" {} ", text.split_whitespace().collect::<Vec<_>>().join(" "));
        for t in &state.target_items {
            let title = t.title.to_lowercase();
            let title = title.strip_prefix("the ").unwrap_or(&title);
            if text.contains(&format!(" {title} ")) {
                if i < state.seed_prefix_len {
                    history += 1;
                } else if m.role == Role::Simulator {
                    response += 1;
                }
            }
        }
    }
    (history, response)
}

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

/// Anonymizes `n` random dates and runtimes; returns every output that still
/// carries a day-level date or an exact minute count.
pub fn precision_violations(n: usize, seed: u64) -> Vec<String> {
    let day_level = Regex::new(
        r"(?i)\d{4}-\d{2}-\d{2}|\d{1,2}/\d{1,2}/\d{4}|(jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\.? \d",
    )
    .unwrap();
    let four_digit = Regex::new(r"\d{4}").unwrap();
    let minute_words = Regex::new(r"(?i)\bmin").unwrap();
    let sensitive = default_sensitive();
    let anon = |attribute: &str, value: &str| {
        anonymize_facet(&PreferenceFacet::new(attribute, value), &sensitive).map(|f| f.value)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..n {
        let (y, m, d) = (rng.gen_range(1900..2030), rng.gen_range(1..=12), rng.gen_range(1..=28));
        let raw = match rng.gen_range(0..4) {
            0 => format!("{} {d}, {y}", MONTHS[m - 1]),
            1 => format!("{y}-{m:02}-{d:02}"),
            2 => format!("{d} {} {y}", MONTHS[m - 1]),
            _ => format!("{m:02}/{d:02}/{y}"),
        };
        match anon("release_date", &raw) {
            Ok(out) => {
                let decade_only = four_digit
                    .find_iter(&out)
                    .all(|y| y.as_str().ends_with('0') && out[y.end()..].starts_with('s'));
                if day_level.is_match(&out) || !decade_only {
                    bad.push(format!("{raw} -> {out}"));
                }
            }
            Err(e) => bad.push(format!("{raw} -> {e}")),
        }

        let minutes: u32 = rng.gen_range(1..400);
        let raw = if rng.gen_bool(0.5) {
            format!("{minutes} minutes")
        } else {
            format!("{minutes} min")
        };
        match anon("runtime", &raw) {
            Ok(out) => {
                let exact = Regex::new(&format!(r"\b{minutes}\b")).unwrap();
                if minute_words.is_match(&out) || (minutes >= 10 && exact.is_match(&out)) {
                    bad.push(format!("{raw} -> {out}"));
                }
            }
            Err(e) => bad.push(format!("{raw} -> {e}")),
        }
    }
    bad
}

fn random_scalar(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..6) {
        0 => Value::Null,
        1 => json!(rng.gen_bool(0.5)),
        2 => json!(rng.gen_range(-5..100)),
        3 => json!(["ask", "recommend", "chit_chat", "chitchat", "RECOMMEND", ""][rng.gen_range(0..6)]),
        4 => json!("Some Film (1999)"),
        _ => json!(" "),
    }
}

fn random_item(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..5) {
        0 => random_scalar(rng),
        1 => json!({"title": random_scalar(rng)}),
        2 => json!({"item_id": random_scalar(rng), "title": format!("Film {}", rng.gen_range(0..99))}),
        _ => json!({"title": format!("Film {}", rng.gen_range(0..99))}),
    }
}

pub fn items(n: usize) -> Value {
    Value::Array((0..n).map(|i| json!({"title": format!("Film {i}")})).collect())
}

fn well_formed(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..3) {
        0 => json!({"kind": "ask", "text": "Which genre?"}),
        1 => json!({"kind": "chitchat", "text": "Nice!", "items": []}),
        _ => json!({"kind": "recommend", "text": "Try", "items": items(rng.gen_range(1..60))}),
    }
}

/// A CRS reply body: well-formed, structurally odd, or corrupted bytes.
pub fn random_payload(rng: &mut ChaCha8Rng) -> Vec<u8> {
    if rng.gen_bool(0.4) {
        return serde_json::to_vec(&well_formed(rng)).unwrap();
    }
    let mut obj = serde_json::Map::new();
    if rng.gen_bool(0.9) {
        obj.insert("kind".into(), random_scalar(rng));
    }
    if rng.gen_bool(0.8) {
        obj.insert("text".into(), if rng.gen_bool(0.8) { json!("hello") } else { random_scalar(rng) });
    }
    if rng.gen_bool(0.7) {
        let items = if rng.gen_bool(0.85) {
            Value::Array((0..rng.gen_range(0..70)).map(|_| random_item(rng)).collect())
        } else {
            random_scalar(rng)
        };
        obj.insert("items".into(), items);
    }
    if rng.gen_bool(0.1) {
        obj.insert("extra".into(), json!({"nested": [1, 2, 3]}));
    }
    let value = if rng.gen_bool(0.05) { random_scalar(rng) } else { Value::Object(obj) };
    let mut bytes = serde_json::to_vec(&value).unwrap();
    match rng.gen_range(0..10) {
        0 => bytes.truncate(rng.gen_range(0..=bytes.len())),
        1 => {
            let n = bytes.len();
            if n > 0 {
                bytes[rng.gen_range(0..n)] = rng.gen();
            }
        }
        _ => {}
    }
    bytes
}

/// Nearest integer of `q * n / 4`, halves up.
pub fn quarter_round(q: usize, n: usize) -> usize {
    (q * n + 2) / 4
}

fn genre_info(n: usize) -> Vec<std::collections::BTreeMap<String, Vec<String>>> {
    let mut map = std::collections::BTreeMap::new();
    map.insert("genre".to_string(), (0..n).map(|i| format!("genre{i}")).collect());
    vec![map]
}

#[derive(Debug, Default)]
pub struct SplitGrid {
    pub cases: usize,
    /// Cases where both rounded shares cannot fit in `n`.
    pub infeasible: usize,
    pub mismatches: Vec<String>,
}

/// Every quarter-step (k1, k2) with k1 + k2 <= 1 for n in 0..=30.
pub fn split_grid() -> SplitGrid {
    use cshi_core::plugins::preferences::realtime_preferences;
    use cshi_core::plugins::{NoTargets, SplitConfig};
    let mut grid = SplitGrid::default();
    for n in 0..=30 {
        for q1 in 0..=4usize {
            for q2 in 0..=(4 - q1) {
                grid.cases += 1;
                let cfg = SplitConfig {
                    k1: q1 as f64 / 4.0,
                    k2: q2 as f64 / 4.0,
                    seed: n as u64,
                };
                let facets = realtime_preferences(&genre_info(n), &cfg, &[], &NoTargets).unwrap();
                let again = realtime_preferences(&genre_info(n), &cfg, &[], &NoTargets).unwrap();
                let known = facets.iter().filter(|f| f.is_known()).count();
                let unknown = facets.len() - known;
                let want_known = quarter_round(q1, n);
                let mut want_unknown = quarter_round(q2, n);
                if want_known + want_unknown > n {
                    grid.infeasible += 1;
                    want_unknown = n - want_known;
                }
                if (known, unknown) != (want_known, want_unknown) || facets != again {
                    grid.mismatches.push(format!(
                        "n={n} k1={} k2={}: got {known}/{unknown}, want {want_known}/{want_unknown}",
                        cfg.k1, cfg.k2
                    ));
                }
            }
        }
    }
    grid
}
