#![allow(dead_code)]

use std::net::TcpStream;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use cshi_core::crs::{BuiltinCrs, CrsAdapter, CrsFactory};
use cshi_core::domain::{Catalog, CatalogItem, ItemId};
use cshi_core::harness::{RunContext, ScenarioConfig};
use cshi_core::llm::{ChatBackend, ChatRequest, ChatResponse, LlmError, ScriptFile, ScriptedBackend};
use cshi_core::plugins::{default_pipeline, SplitConfig};
use cshi_core::prompts::PromptTemplates;
use cshi_service::{Event, SessionService};

pub const SCRIPT: &str = r#"{"strict": true, "rules": [
  {"tag":"crs_strategy","match":{"regex":"ROUND: [12]\n"},"response":"ask"},
  {"tag":"crs_action","match":{"contains":"heist"},"response":"Heist fans tend to love Night Vault."},
  {"tag":"crs_action","match":{"contains":"ACTION: ask"},"response":"What genres do you enjoy?"},
  {"tag":"intent","match":{"contains":"What genres do you enjoy"},"response":"{\"intent\":\"ask\",\"attribute\":\"genre\"}"},
  {"tag":"ask_nonpersonalized","match":{"contains":"red umbrella"},"response":"Comedies, and I keep thinking of that poster with the red umbrella."}
], "defaults": {
  "crs_strategy":"recommend",
  "crs_action":"1. Iron Kite Boxing (2004)\nTry it.",
  "intent":"{\"intent\":\"chit_chat\"}",
  "opener":"Hi, can you suggest a movie?",
  "preference_summary":"You like light comedies.",
  "ask_personalized":"Comedies, like the ones I watched.",
  "ask_nonpersonalized":"Comedies, mostly.",
  "ask_retrieve":"NONE",
  "ask_no_preference":"No idea.",
  "recommend_accept":"That sounds great.",
  "recommend_reject":"Not quite.",
  "chitchat":"Sure."
}}"#;

pub fn catalog() -> Catalog {
    let item = |id: &str, title: &str, year, attrs: &[(&str, &str)]| CatalogItem {
        item_id: ItemId(id.into()),
        title: title.into(),
        year: Some(year),
        attributes: attrs.iter().map(|(k, v)| (k.to_string(), vec![v.to_string()])).collect(),
    };
    Catalog::new(vec![
        item("t1", "Harbor Of Bells", 2001, &[("genre", "comedy"), ("director", "Wen Lo")]),
        item("d1", "Iron Kite Boxing", 2004, &[("genre", "action"), ("director", "Wen Lo")]),
        item("h1", "Quiet Fields", 1995, &[("genre", "drama")]),
    ])
    .unwrap()
}

pub fn scripted() -> Arc<ScriptedBackend> {
    let script: ScriptFile = serde_json::from_str(SCRIPT).unwrap();
    Arc::new(ScriptedBackend::new(script).unwrap())
}

pub fn context(llm: Arc<dyn ChatBackend>) -> RunContext {
    let templates = Arc::new(PromptTemplates::default());
    let (crs_llm, crs_templates) = (llm.clone(), templates.clone());
    let crs: CrsFactory = Arc::new(move || {
        Box::new(BuiltinCrs::new(crs_llm.clone(), crs_templates.clone())) as Box<dyn CrsAdapter>
    });
    RunContext {
        catalog: Arc::new(catalog()),
        llm,
        templates,
        pipeline: Arc::new(default_pipeline()),
        crs,
    }
}

pub fn config() -> ScenarioConfig {
    ScenarioConfig {
        max_turns: 3,
        split: SplitConfig { k1: 1.0, k2: 0.0, seed: 3 },
        ..ScenarioConfig::fresh()
    }
}

pub fn open(dir: &Path, llm: Arc<dyn ChatBackend>) -> Arc<SessionService> {
    Arc::new(SessionService::open(context(llm), config(), dir).unwrap())
}

/// Serves on an ephemeral port from a background runtime.
pub fn serve(service: Arc<SessionService>, token: Option<&str>) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    listener.set_nonblocking(true).unwrap();
    let token = token.map(str::to_string);
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            cshi_service::serve(listener, service, token).await.unwrap();
        });
    });
    format!("127.0.0.1:{}", addr.port())
}

pub fn create_body(id: &str) -> Value {
    json!({"session_id": id, "user_id": "u1", "target_item_ids": ["t1"]})
}

/// (status, body) of a JSON request.
pub fn call(method: &str, url: &str, body: Option<Value>) -> (u16, Value) {
    let req = ureq::request(method, url);
    let result = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    let resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{method} {url}: {e}"),
    };
    let status = resp.status();
    (status, resp.into_json().unwrap_or(Value::Null))
}

pub type Socket = tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>;

pub fn subscribe(host: &str, id: &str, from: u64) -> Socket {
    let (socket, _) = tungstenite::connect(format!("ws://{host}/sessions/{id}/events?from={from}")).unwrap();
    if let tungstenite::stream::MaybeTlsStream::Plain(s) = socket.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    }
    socket
}

/// Reads events until `last_seq` has arrived.
pub fn read_until(socket: &mut Socket, last_seq: u64) -> Vec<Event> {
    let mut out = Vec::new();
    while out.last().map_or(true, |e: &Event| e.seq < last_seq) {
        match socket.read().unwrap() {
            tungstenite::Message::Text(t) => out.push(serde_json::from_str(&t).unwrap()),
            tungstenite::Message::Close(f) => panic!("closed: {f:?}"),
            _ => {}
        }
    }
    out
}

/// Passes calls through, except that `tag` blocks until released.
pub struct Gate {
    pub inner: Arc<dyn ChatBackend>,
    pub tag: &'static str,
    pub open: Mutex<bool>,
    pub cv: std::sync::Condvar,
}

impl Gate {
    pub fn new(inner: Arc<dyn ChatBackend>, tag: &'static str) -> Arc<Gate> {
        Arc::new(Gate {
            inner,
            tag,
            open: Mutex::new(false),
            cv: std::sync::Condvar::new(),
        })
    }

    pub fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl ChatBackend for Gate {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        if request.tag == self.tag {
            let mut open = self.open.lock().unwrap();
            while !*open {
                open = self.cv.wait(open).unwrap();
            }
        }
        self.inner.complete(request)
    }
}
