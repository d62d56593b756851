//! Scripted end-to-end scenarios shared by the suites and the acceptance run.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use cshi_core::domain::{
    Catalog, CatalogItem, ItemId, Message, PreferenceFacet, RatingRecord, Role, SessionState,
    SessionStatus, UserId,
};
use cshi_core::harness::{
    build_report, run_sessions, write_outputs, Report, RunContext, ScenarioConfig, SessionEngine,
    SessionRecord, SessionSpec, SimulatorKind,
};
use cshi_core::llm::{
    open_replay, ChatBackend, MatchRule, RemoteBackend, RemoteConfig, ReplayMode, ScriptFile,
    ScriptRule, ScriptScope, ScriptedBackend,
};
use cshi_core::plugins::SplitConfig;

use super::{context, counting_pipeline, fixture, golden_config, golden_dataset, golden_setup, scripted, StubServer};

fn item(id: &str, title: &str, year: i32, attrs: &[(&str, &str)]) -> CatalogItem {
    CatalogItem {
        item_id: ItemId(id.into()),
        title: title.into(),
        year: Some(year),
        attributes: attrs.iter().map(|(k, v)| (k.to_string(), vec![v.to_string()])).collect(),
    }
}

pub fn small_catalog() -> Catalog {
    Catalog::new(vec![
        item("t1", "Harbor Of Bells", 2001, &[("genre", "comedy"), ("director", "Wen Lo"), ("runtime", "95 min")]),
        item("d1", "Iron Kite Boxing", 2004, &[("genre", "action"), ("director", "Wen Lo")]),
        item("h1", "Quiet Fields", 1995, &[("genre", "drama"), ("director", "Mara Ostrova")]),
        item("h2", "Seven Gulls", 1997, &[("genre", "drama"), ("director", "Mara Ostrova")]),
    ])
    .unwrap()
}

pub fn small_spec(history: &[&str]) -> SessionSpec {
    let cat = small_catalog();
    SessionSpec {
        session_id: "s1".into(),
        user_id: UserId("u1".into()),
        targets: vec![cat.get(&ItemId("t1".into())).unwrap().clone()],
        seed_turns: Vec::new(),
        history: history
            .iter()
            .enumerate()
            .map(|(i, id)| RatingRecord {
                user_id: UserId("u1".into()),
                item_id: ItemId(id.to_string()),
                rating: 4.5,
                timestamp: Some(i as i64),
            })
            .collect(),
        raw_user: None,
        persona: String::new(),
    }
}

const ACTIVATION: &str = r#"{"strict": true, "rules": [
  {"tag":"crs_strategy","match":{"regex":"ROUND: 1\n"},"response":"ask"},
  {"tag":"crs_action","match":{"contains":"ACTION: ask"},"response":"What genres do you enjoy?"},
  {"tag":"intent","match":{"contains":"what genres do you enjoy"},"response":"{\"intent\":\"ask\",\"attribute\":\"genre\"}"},
  {"tag":"recommend_reject","match":{"regex":"NEW_PREFERENCES: director: ([^\n]+)"},"response":"Not that one, but it reminds me I love films by $1."}
], "defaults": {
  "crs_strategy":"recommend",
  "crs_action":"1. Iron Kite Boxing (2004)\nA fun pick.",
  "opener":"Hi, can you suggest a movie?",
  "ask_no_preference":"I don't mind.",
  "recommend_reject":"Not quite.",
  "chitchat":"Sure."
}}"#;

pub struct ActivationRun {
    pub state: SessionState,
    pub initially_unknown: bool,
    /// Turn of the simulator message that reported the promotion.
    pub promoted_at: Option<u32>,
    pub director: PreferenceFacet,
}

/// Every target facet starts Unknown; the CRS asks once, then keeps
/// recommending a decoy that shares the target's director.
pub fn activation_run() -> ActivationRun {
    let ctx = context(small_catalog(), scripted(ACTIVATION));
    let cfg = ScenarioConfig {
        split: SplitConfig { k1: 0.0, k2: 1.0, seed: 1 },
        max_turns: 3,
        ..ScenarioConfig::fresh()
    };
    let mut engine = SessionEngine::start(&ctx, &cfg, small_spec(&[])).unwrap();
    let director = |s: &SessionState| {
        s.memory.real_time.iter().find(|f| f.attribute == "director").unwrap().clone()
    };
    let initially_unknown = !director(&engine.state).is_known();
    let mut promoted_at = None;
    while !engine.is_finished() {
        if engine.user_turn_next() {
            let out = engine.simulator_turn().unwrap();
            if !out.events.is_empty() {
                promoted_at = Some(out.message.turn);
            }
        } else {
            engine.crs_turn().unwrap();
        }
    }
    let state = engine.finish();
    ActivationRun {
        director: director(&state),
        state,
        initially_unknown,
        promoted_at,
    }
}

const ASK: &str = r#"{"strict": true, "rules": [
  {"tag":"intent","match":{"contains":"which directors do you like"},"response":"{\"intent\":\"ask\",\"attribute\":\"director\"}"},
  {"tag":"ask_retrieve","match":{"contains":"Quiet Fields"},"response":"Quiet Fields (1995)"}
], "defaults": {
  "crs_strategy":"ask",
  "crs_action":"Which directors do you like?",
  "opener":"Hi, can you suggest a movie?",
  "preference_summary":"You like slow dramas.",
  "ask_personalized":"I loved how those were directed.",
  "ask_nonpersonalized":"Good question.",
  "ask_retrieve":"NONE",
  "ask_no_preference":"No idea."
}}"#;

pub struct AskRun {
    /// Simulator messages in order: opener, then the answer to the ask.
    pub replies: Vec<String>,
    pub counters: BTreeMap<String, Arc<AtomicUsize>>,
    pub backend: Arc<ScriptedBackend>,
}

/// One director question answered with the given long-term history.
pub fn ask_run(history: &[&str]) -> AskRun {
    let backend = scripted(ASK);
    let (pipeline, counters) = counting_pipeline();
    let ctx = RunContext {
        pipeline: Arc::new(pipeline),
        ..context(small_catalog(), backend.clone())
    };
    let cfg = ScenarioConfig {
        split: SplitConfig { k1: 1.0, k2: 0.0, seed: 0 },
        max_turns: 2,
        ..ScenarioConfig::fresh()
    };
    let mut engine = SessionEngine::start(&ctx, &cfg, small_spec(history)).unwrap();
    engine.run_to_end().unwrap();
    let replies = engine
        .finish()
        .transcript
        .iter()
        .filter(|m| m.role == Role::Simulator)
        .map(|m| m.text.clone())
        .collect();
    AskRun {
        replies,
        counters,
        backend,
    }
}

pub fn completion(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 2}
    })
    .to_string()
}

/// OpenAI-style stub. Free-text replies carry a running counter, so a
/// second live run would differ from the first.
pub fn chat_stub() -> StubServer {
    let counter = Arc::new(AtomicUsize::new(0));
    StubServer::start(Arc::new(move |path, body| {
        assert!(path.ends_with("/chat/completions"));
        let body: Value = serde_json::from_slice(body).unwrap();
        let prompt = body["messages"].as_array().unwrap().last().unwrap()["content"]
            .as_str()
            .unwrap()
            .to_string();
        let text = if prompt.contains("strategy module") {
            if prompt.contains("ROUND: 1\n") { "ask" } else { "recommend" }.to_string()
        } else if prompt.contains("ACTION: ask") {
            "What genres do you enjoy?".to_string()
        } else if prompt.contains("ACTION: recommend") {
            "1. Saltwind (2003)\n2. Glasshouse Summer (2005)\nTry these.".to_string()
        } else if prompt.contains("Classify the latest message") {
            if prompt.contains("What genres") {
                r#"{"intent": "ask", "attribute": "genre"}"#.to_string()
            } else {
                r#"{"intent": "chit_chat"}"#.to_string()
            }
        } else if prompt.contains("HISTORY:") {
            "NONE".to_string()
        } else {
            format!("Reply {}.", counter.fetch_add(1, Ordering::SeqCst))
        };
        (200, completion(&text))
    }))
}

pub fn remote(url: &str) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        backoff_ms: 1,
        requests_per_minute: 0,
        ..RemoteConfig::new(format!("{url}/v1"), "stub-model")
    })
}

pub struct ReplayRun {
    pub cfg: ScenarioConfig,
    pub recorded: Vec<SessionRecord>,
    pub replayed: Vec<SessionRecord>,
    pub live_hits: usize,
    pub hits_after_replay: usize,
}

/// Records five sessions against the stub, then replays them offline.
pub fn record_then_replay() -> ReplayRun {
    let server = chat_stub();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("replay.jsonl");
    let (_, _, specs) = golden_setup(scripted("{}"));
    let specs: Vec<_> = specs.into_iter().filter(|s| s.session_id.starts_with("u1-")).collect();
    let cfg = ScenarioConfig {
        max_turns: 4,
        workers: 1,
        ..golden_config()
    };

    let recorder = open_replay(ReplayMode::Record, &store, Arc::new(remote(&server.url))).unwrap();
    let recorded = run_sessions(&context(golden_dataset().1, recorder), &cfg, specs.clone());
    let live_hits = server.hits();

    let replayer = open_replay(ReplayMode::Replay, &store, scripted("{}") as Arc<dyn ChatBackend>).unwrap();
    let parallel = ScenarioConfig { workers: 4, ..cfg.clone() };
    let replayed = run_sessions(&context(golden_dataset().1, replayer), &parallel, specs);
    ReplayRun {
        cfg,
        recorded,
        replayed,
        live_hits,
        hits_after_replay: server.hits(),
    }
}

fn rule(tag: &str, matcher: MatchRule, scope: ScriptScope, response: &str) -> ScriptRule {
    ScriptRule {
        tag: tag.into(),
        matcher,
        scope,
        response: response.into(),
    }
}

/// Golden script plus a single-prompt rule that repeats the target title
/// line, and simulator rules that echo their whole prompt back.
pub fn echo_backend() -> Arc<ScriptedBackend> {
    let raw = std::fs::read_to_string(fixture("golden/script.json")).unwrap();
    let mut script: ScriptFile = serde_json::from_str(&raw).unwrap();
    let mut rules = vec![rule(
        "single_prompt",
        MatchRule::Regex(r"title: ([^\n]+)".into()),
        ScriptScope::All,
        "I am hoping for $1, do you know it?",
    )];
    for tag in [
        "opener",
        "ask_personalized",
        "ask_nonpersonalized",
        "ask_no_preference",
        "recommend_accept",
        "recommend_reject",
        "chitchat",
    ] {
        rules.push(rule(tag, MatchRule::Regex(r"(?s).+".into()), ScriptScope::All, "$0"));
    }
    rules.append(&mut script.rules);
    script.rules = rules;
    Arc::new(ScriptedBackend::new(script).unwrap())
}

/// `copies` replicas of the 20 golden specs, with distinct session ids.
pub fn replicated_specs(copies: usize) -> Vec<SessionSpec> {
    let (_, _, specs) = golden_setup(scripted("{}"));
    (0..copies)
        .flat_map(|r| {
            specs.iter().map(move |s| SessionSpec {
                session_id: format!("{}-r{r}", s.session_id),
                ..s.clone()
            })
        })
        .collect()
}

pub fn run_with(llm: Arc<dyn ChatBackend>, simulator: SimulatorKind, specs: Vec<SessionSpec>, max_turns: u32) -> Vec<SessionRecord> {
    let cfg = ScenarioConfig {
        simulator,
        max_turns,
        ..golden_config()
    };
    run_sessions(&context(golden_dataset().1, llm), &cfg, specs)
}

/// Simulator messages of `state`.
pub fn simulator_texts(state: &SessionState) -> Vec<&Message> {
    state.transcript.iter().filter(|m| m.role == Role::Simulator).collect()
}

pub fn golden_trace() -> Vec<(String, SessionStatus)> {
    let raw = std::fs::read_to_string(fixture("golden/trace.csv")).unwrap();
    raw.lines()
        .skip(1)
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let turns: u32 = cols[2].parse().unwrap();
            let status = match cols[1] {
                "succeeded" => SessionStatus::Succeeded(turns),
                _ => SessionStatus::MaxTurnsReached,
            };
            (cols[0].to_string(), status)
        })
        .collect()
}

pub struct GoldenRun {
    pub records: Vec<SessionRecord>,
    pub report: Report,
    /// report.json as written to disk.
    pub produced: String,
    pub golden: String,
    pub elapsed: Duration,
}

/// Runs the 20 golden sessions and writes their outputs to a scratch dir.
/// With CSHI_UPDATE_GOLDEN set the committed report is refreshed first.
pub fn golden_run() -> GoldenRun {
    let started = Instant::now();
    let (ctx, cfg, specs) = golden_setup(super::golden_backend());
    let records = run_sessions(&ctx, &cfg, specs);
    let report = build_report(&records, &cfg);
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &report, &records).unwrap();
    let produced = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let elapsed = started.elapsed();
    let golden_path = fixture("golden/report.json");
    if std::env::var_os("CSHI_UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden_path, &produced).unwrap();
    }
    let golden = std::fs::read_to_string(&golden_path).expect("golden report committed");
    GoldenRun {
        records,
        report,
        produced,
        golden,
        elapsed,
    }
}

/// Hand-computed metrics committed next to the golden trace.
pub fn expected_metrics() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("golden/expected_metrics.json")).unwrap()).unwrap()
}
