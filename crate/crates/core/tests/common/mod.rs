#![allow(dead_code)]

pub mod oracle;
pub mod scenarios;

use std::io::{BufRead, BufReader, Read, Write};
use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use cshi_core::crs::{BuiltinCrs, CrsAdapter, CrsFactory};
use cshi_core::dataset::Dataset;
use cshi_core::domain::Catalog;
use cshi_core::harness::{plan_fresh, RunContext, ScenarioConfig, SessionSpec};
use cshi_core::llm::{ChatBackend, ScriptFile, ScriptedBackend};
use cshi_core::pipeline::{Plugin, PluginContext, PluginDescriptor, PluginFlow, PluginPipeline};
use cshi_core::plugins::{builtin_plugin, default_pipeline, default_pipeline_config, PluginError, SplitConfig};
use cshi_core::prompts::PromptTemplates;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn scripted(json: &str) -> Arc<ScriptedBackend> {
    let script: ScriptFile = serde_json::from_str(json).expect("script json");
    Arc::new(ScriptedBackend::new(script).expect("script compiles"))
}

/// Run context where the simulator and the builtin CRS share `llm`.
pub fn context(catalog: Catalog, llm: Arc<dyn ChatBackend>) -> RunContext {
    let templates = Arc::new(PromptTemplates::default());
    let crs_llm = llm.clone();
    let crs_templates = templates.clone();
    let crs: CrsFactory = Arc::new(move || {
        Box::new(BuiltinCrs::new(crs_llm.clone(), crs_templates.clone())) as Box<dyn CrsAdapter>
    });
    RunContext {
        catalog: Arc::new(catalog),
        llm,
        templates,
        pipeline: Arc::new(default_pipeline()),
        crs,
    }
}

pub fn golden_dataset() -> (Dataset, Catalog) {
    let data = Dataset::load(
        Some(&fixture("golden/items.jsonl")),
        Some(&fixture("golden/ratings.jsonl")),
        None,
    )
    .expect("golden dataset");
    let catalog = Catalog::new(data.items.clone()).expect("golden catalog");
    (data, catalog)
}

pub fn golden_config() -> ScenarioConfig {
    ScenarioConfig {
        split: SplitConfig {
            k1: 1.0,
            k2: 0.0,
            seed: 0,
        },
        seed: 7,
        ..ScenarioConfig::fresh()
    }
}

pub fn golden_backend() -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::from_path(&fixture("golden/script.json")).expect("golden script"))
}

pub fn golden_setup(llm: Arc<dyn ChatBackend>) -> (RunContext, ScenarioConfig, Vec<SessionSpec>) {
    let (data, catalog) = golden_dataset();
    let cfg = golden_config();
    let specs = plan_fresh(&data, &catalog, cfg.holdout).expect("plan");
    (context(catalog, llm), cfg, specs)
}

/// Minimal HTTP/1.1 server answering every request with `handler`.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

pub type Handler = dyn Fn(&str, &[u8]) -> (u16, String) + Send + Sync;

impl StubServer {
    pub fn start(handler: Arc<Handler>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                counter.fetch_add(1, Ordering::SeqCst);
                let handler = handler.clone();
                thread::spawn(move || serve(stream, handler.as_ref()));
            }
        });
        StubServer { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone"));
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let (status, reply) = handler(&path, &body);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
    let _ = stream.flush();
}

struct Counting {
    inner: Arc<dyn Plugin>,
    count: Arc<AtomicUsize>,
}

impl Plugin for Counting {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.run(ctx)
    }
}

/// Default pipeline with an invocation counter around every plugin.
pub fn counting_pipeline() -> (PluginPipeline, BTreeMap<String, Arc<AtomicUsize>>) {
    let mut pipeline = PluginPipeline::new();
    let mut counters = BTreeMap::new();
    for entry in default_pipeline_config().plugins {
        let (inner, activation) = builtin_plugin(&entry.plugin_id, &entry.params).unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        counters.insert(entry.plugin_id.clone(), count.clone());
        pipeline
            .register(
                PluginDescriptor::new(&entry.plugin_id, entry.stage, entry.priority).when(activation),
                Counting { inner, count },
            )
            .unwrap();
    }
    (pipeline, counters)
}

pub fn count(counters: &BTreeMap<String, Arc<AtomicUsize>>, id: &str) -> usize {
    counters[id].load(Ordering::SeqCst)
}
