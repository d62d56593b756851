//! Live sessions. Each one is owned by a single writer thread; HTTP handlers
//! talk to it through a command queue and read its last snapshot directly.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use cshi_core::dataset::AnnotatedTurn;
use cshi_core::domain::{ItemId, Message, RatingRecord, UserId};
use cshi_core::harness::{
    audit_leakage, HarnessError, RunContext, ScenarioConfig, SessionEngine, SessionSpec, StepOutput,
};
use cshi_core::plugins::MemoryEvent;

use crate::events::{fold, Control, Event, EventBody, FoldError, Snapshot};

/// Events a slow subscriber may fall behind before it is dropped.
pub const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error("a turn is in progress; retry or queue the edit")]
    EditDuringTurn,
    #[error("human messages need takeover mode or inject = true")]
    NotInTakeover,
    #[error("it is the recommender's turn")]
    NotUserTurn,
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] HarnessError),
    #[error("corrupt event log {path}: {reason}")]
    CorruptLog { path: PathBuf, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("session loop stopped")]
    Stopped,
}

/// Body of POST /sessions.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub session_id: Option<String>,
    pub user_id: String,
    pub target_item_ids: Vec<String>,
    #[serde(default)]
    pub history: Vec<HistoryRating>,
    #[serde(default)]
    pub seed_turns: Vec<AnnotatedTurn>,
    #[serde(default)]
    pub persona: String,
    #[serde(default)]
    pub config: Option<ScenarioConfig>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HistoryRating {
    pub item_id: String,
    pub rating: f64,
    #[serde(default)]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdvanceResult {
    pub steps: u32,
    pub messages: Vec<Message>,
    /// The session stopped because a person has to write the next message.
    pub awaiting_human: bool,
    pub snapshot: Snapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PostResult {
    pub messages: Vec<Message>,
    pub snapshot: Snapshot,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ProfileEdit {
    #[serde(default)]
    pub persona_text: Option<String>,
    #[serde(default)]
    pub taste_summary: Option<String>,
    /// Wait for the current turn instead of failing with EditDuringTurn.
    #[serde(default = "yes")]
    pub queue: bool,
}

fn yes() -> bool {
    true
}

type Reply<T> = oneshot::Sender<Result<T, ServiceError>>;

enum Command {
    Advance { steps: Option<u32>, reply: Reply<AdvanceResult> },
    Post { text: String, inject: bool, reply: Reply<PostResult> },
    Control { control: Control, reply: Reply<Snapshot> },
    Edit { edit: ProfileEdit, reply: Reply<Snapshot> },
}

struct Journal {
    log: Vec<Event>,
    snapshot: Snapshot,
    file: File,
}

/// State shared between the writer thread and readers.
struct Shared {
    journal: Mutex<Journal>,
    events: broadcast::Sender<Event>,
    busy: AtomicBool,
}

impl Shared {
    /// Appends, persists and broadcasts under one lock so that a subscriber
    /// joining concurrently sees every event exactly once.
    fn emit(&self, body: EventBody) -> Result<(), ServiceError> {
        let mut journal = self.journal.lock().expect("journal lock");
        let event = Event {
            seq: journal.snapshot.last_seq + 1,
            body,
        };
        let line = serde_json::to_string(&event).expect("event serializes");
        writeln!(journal.file, "{line}")?;
        journal.file.flush()?;
        journal.snapshot.apply(&event);
        journal.log.push(event.clone());
        // No receivers is fine.
        let _ = self.events.send(event);
        Ok(())
    }

    fn snapshot(&self) -> Snapshot {
        self.journal.lock().expect("journal lock").snapshot.clone()
    }
}

/// Client side of one live session.
#[derive(Clone)]
pub struct SessionHandle {
    commands: mpsc::Sender<Command>,
    shared: Arc<Shared>,
}

/// Backlog from `from_seq` on plus a receiver for everything after it.
pub struct Subscription {
    pub backlog: Vec<Event>,
    pub live: broadcast::Receiver<Event>,
}

impl SessionHandle {
    pub fn snapshot(&self) -> Snapshot {
        self.shared.snapshot()
    }

    pub fn subscribe(&self, from_seq: u64) -> Subscription {
        let journal = self.shared.journal.lock().expect("journal lock");
        let backlog = journal.log.iter().filter(|e| e.seq >= from_seq).cloned().collect();
        Subscription {
            backlog,
            live: self.shared.events.subscribe(),
        }
    }

    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, ServiceError> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(make(tx)).map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)?
    }

    /// Runs up to `steps` turns, or to the end when None.
    pub async fn advance(&self, steps: Option<u32>) -> Result<AdvanceResult, ServiceError> {
        self.call(|reply| Command::Advance { steps, reply }).await
    }

    pub async fn post_message(&self, text: String, inject: bool) -> Result<PostResult, ServiceError> {
        self.call(|reply| Command::Post { text, inject, reply }).await
    }

    pub async fn set_control(&self, control: Control) -> Result<Snapshot, ServiceError> {
        self.call(|reply| Command::Control { control, reply }).await
    }

    pub async fn edit_profile(&self, edit: ProfileEdit) -> Result<Snapshot, ServiceError> {
        if !edit.queue && self.shared.busy.load(Ordering::SeqCst) {
            return Err(ServiceError::EditDuringTurn);
        }
        self.call(|reply| Command::Edit { edit, reply }).await
    }
}

struct Writer {
    engine: SessionEngine,
    control: Control,
    shared: Arc<Shared>,
    commands: mpsc::Receiver<Command>,
    deferred: VecDeque<Command>,
}

impl Writer {
    fn run(mut self) {
        loop {
            let cmd = match self.deferred.pop_front() {
                Some(cmd) => cmd,
                None => match self.commands.recv() {
                    Ok(cmd) => cmd,
                    Err(_) => return,
                },
            };
            self.handle(cmd, false);
        }
    }

    /// Commands that arrive while advancing are handled between turns;
    /// nested advances wait until the current one is done.
    fn drain_between_turns(&mut self) {
        while let Ok(cmd) = self.commands.try_recv() {
            self.handle(cmd, true);
        }
    }

    fn handle(&mut self, cmd: Command, nested: bool) {
        match cmd {
            Command::Advance { steps, reply } if !nested => {
                let _ = reply.send(self.advance(steps));
            }
            cmd @ Command::Advance { .. } => self.deferred.push_back(cmd),
            Command::Post { text, inject, reply } => {
                let _ = reply.send(self.post(&text, inject));
            }
            Command::Control { control, reply } => {
                let result = if control != self.control {
                    self.control = control;
                    self.shared.emit(EventBody::ControlChanged { control }).map(|_| self.shared.snapshot())
                } else {
                    Ok(self.shared.snapshot())
                };
                let _ = reply.send(result);
            }
            Command::Edit { edit, reply } => {
                let _ = reply.send(self.edit(edit));
            }
        }
    }

    fn edit(&mut self, edit: ProfileEdit) -> Result<Snapshot, ServiceError> {
        self.engine.edit_profile(edit.persona_text, edit.taste_summary)?;
        self.shared.emit(EventBody::MemoryUpdated {
            memory: self.engine.state.memory.clone(),
        })?;
        Ok(self.shared.snapshot())
    }

    fn step<F>(&mut self, f: F) -> Result<Message, ServiceError>
    where
        F: FnOnce(&mut SessionEngine) -> Result<StepOutput, HarnessError>,
    {
        self.shared.busy.store(true, Ordering::SeqCst);
        let before = self.engine.state.status;
        let out = f(&mut self.engine);
        self.shared.busy.store(false, Ordering::SeqCst);
        let out = out?;
        self.shared.emit(EventBody::MessageAppended {
            message: out.message.clone(),
        })?;
        for event in &out.events {
            if let MemoryEvent::FacetPromoted { facet } = event {
                self.shared.emit(EventBody::FacetPromoted { facet: facet.clone() })?;
            }
        }
        self.shared.emit(EventBody::MemoryUpdated {
            memory: self.engine.state.memory.clone(),
        })?;
        if out.status != before {
            self.shared.emit(EventBody::StatusChanged { status: out.status })?;
        }
        if self.engine.is_finished() {
            let leakage = audit_leakage(&self.engine.state);
            self.engine.state.leakage = leakage.clone();
            self.shared.emit(EventBody::LeakageAudited { leakage })?;
        }
        Ok(out.message)
    }

    fn advance(&mut self, steps: Option<u32>) -> Result<AdvanceResult, ServiceError> {
        let mut taken = 0;
        let mut messages = Vec::new();
        let mut awaiting_human = false;
        while !self.engine.is_finished() && steps.is_none_or(|n| taken < n) {
            if self.engine.user_turn_next() {
                if self.control == Control::HumanTakeover {
                    awaiting_human = true;
                    break;
                }
                messages.push(self.step(|e| e.simulator_turn())?);
            } else {
                messages.push(self.step(|e| e.crs_turn())?);
            }
            taken += 1;
            self.drain_between_turns();
        }
        Ok(AdvanceResult {
            steps: taken,
            messages,
            awaiting_human,
            snapshot: self.shared.snapshot(),
        })
    }

    /// A person's message goes into the transcript and the recommender
    /// answers it right away.
    fn post(&mut self, text: &str, inject: bool) -> Result<PostResult, ServiceError> {
        if self.control != Control::HumanTakeover && !inject {
            return Err(ServiceError::NotInTakeover);
        }
        if self.engine.is_finished() {
            return Err(HarnessError::Finished.into());
        }
        if !self.engine.user_turn_next() {
            return Err(ServiceError::NotUserTurn);
        }
        let mut messages = vec![self.step(|e| e.human_turn(text))?];
        if !self.engine.is_finished() {
            messages.push(self.step(|e| e.crs_turn())?);
        }
        Ok(PostResult {
            messages,
            snapshot: self.shared.snapshot(),
        })
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Registry of live sessions, persisted as one JSONL event log per session.
pub struct SessionService {
    ctx: RunContext,
    defaults: ScenarioConfig,
    dir: PathBuf,
    sessions: RwLock<BTreeMap<String, SessionHandle>>,
    next_id: Mutex<u64>,
}

impl SessionService {
    /// Opens `dir`, resuming every session logged there.
    pub fn open(ctx: RunContext, defaults: ScenarioConfig, dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let service = SessionService {
            ctx,
            defaults,
            dir,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: Mutex::new(1),
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&service.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            service.resume(&path)?;
        }
        Ok(service)
    }

    fn resume(&self, path: &Path) -> Result<(), ServiceError> {
        let corrupt = |reason: String| ServiceError::CorruptLog {
            path: path.to_path_buf(),
            reason,
        };
        let mut events = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str::<Event>(&line).map_err(|e| corrupt(format!("line {}: {e}", i + 1)))?);
        }
        let (spec, snapshot) = fold(&events).map_err(|e: FoldError| corrupt(e.to_string()))?;
        let engine = SessionEngine::resume(&self.ctx, &snapshot.config, &spec, snapshot.state.clone())?;
        let file = OpenOptions::new().append(true).open(path)?;
        let id = snapshot.session_id.clone();
        tracing::info!(session = %id, events = events.len(), "resumed session");
        self.spawn(id, engine, snapshot, events, file);
        Ok(())
    }

    fn spawn(&self, id: String, engine: SessionEngine, snapshot: Snapshot, log: Vec<Event>, file: File) -> SessionHandle {
        let (events, _) = broadcast::channel(SUBSCRIBER_BUFFER);
        let control = snapshot.control;
        let shared = Arc::new(Shared {
            journal: Mutex::new(Journal { log, snapshot, file }),
            events,
            busy: AtomicBool::new(false),
        });
        let (tx, rx) = mpsc::channel();
        let writer = Writer {
            engine,
            control,
            shared: shared.clone(),
            commands: rx,
            deferred: VecDeque::new(),
        };
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || writer.run())
            .expect("spawn session thread");
        let handle = SessionHandle { commands: tx, shared };
        self.sessions.write().expect("registry lock").insert(id, handle.clone());
        handle
    }

    fn spec_for(&self, id: String, req: &CreateSession) -> Result<SessionSpec, ServiceError> {
        let item = |raw: &str| {
            self.ctx
                .catalog
                .get(&ItemId(raw.to_string()))
                .cloned()
                .ok_or_else(|| ServiceError::UnknownItem(raw.to_string()))
        };
        let targets = req.target_item_ids.iter().map(|t| item(t)).collect::<Result<Vec<_>, _>>()?;
        if targets.is_empty() {
            return Err(ServiceError::Invalid("target_item_ids is empty".into()));
        }
        let user_id = UserId(req.user_id.clone());
        let mut history = Vec::new();
        for r in &req.history {
            item(&r.item_id)?;
            history.push(RatingRecord {
                user_id: user_id.clone(),
                item_id: ItemId(r.item_id.clone()),
                rating: r.rating,
                timestamp: r.timestamp,
            });
        }
        Ok(SessionSpec {
            session_id: id,
            user_id,
            targets,
            seed_turns: req.seed_turns.clone(),
            history,
            raw_user: None,
            persona: req.persona.clone(),
        })
    }

    fn fresh_id(&self) -> String {
        let sessions = self.sessions.read().expect("registry lock");
        let mut next = self.next_id.lock().expect("id lock");
        loop {
            let id = format!("live-{}", *next);
            *next += 1;
            if !sessions.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn create(&self, req: CreateSession) -> Result<Snapshot, ServiceError> {
        let id = match &req.session_id {
            Some(id) if !valid_id(id) => {
                return Err(ServiceError::Invalid("session_id may only use letters, digits, '-' and '_'".into()))
            }
            Some(id) => id.clone(),
            None => self.fresh_id(),
        };
        if self.sessions.read().expect("registry lock").contains_key(&id) {
            return Err(ServiceError::SessionExists(id));
        }
        let config = req.config.clone().unwrap_or_else(|| self.defaults.clone());
        let spec = self.spec_for(id.clone(), &req)?;
        let engine = SessionEngine::start(&self.ctx, &config, spec.clone())?;
        let path = self.dir.join(format!("{id}.jsonl"));
        let file = OpenOptions::new().create_new(true).append(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                ServiceError::SessionExists(id.clone())
            } else {
                e.into()
            }
        })?;
        let header = Event {
            seq: 1,
            body: EventBody::SessionCreated {
                config,
                spec,
                state: engine.state.clone(),
            },
        };
        let (_, snapshot) = fold(std::slice::from_ref(&header)).expect("header folds");
        let mut file = file;
        writeln!(file, "{}", serde_json::to_string(&header).expect("event serializes"))?;
        file.flush()?;
        let handle = self.spawn(id, engine, snapshot, vec![header], file);
        Ok(handle.snapshot())
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().expect("registry lock").keys().cloned().collect()
    }
}
