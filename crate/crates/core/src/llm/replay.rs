use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Record,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreEntry {
    key: String,
    tag: String,
    request: ChatRequest,
    response: ChatResponse,
}

/// JSONL store of request-hash -> response pairs.
pub struct ReplayStore {
    path: PathBuf,
    entries: HashMap<String, ChatResponse>,
}

impl ReplayStore {
    /// Loads an existing store, or starts an empty one if the file is absent.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| io_err(path, e))?;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: StoreEntry = serde_json::from_str(&line).map_err(|e| {
                    LlmError::Store(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                entries.entry(entry.key).or_insert(entry.response);
            }
        }
        Ok(ReplayStore {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&ChatResponse> {
        self.entries.get(key)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> LlmError {
    LlmError::Store(format!("{}: {e}", path.display()))
}

/// Cache-through recorder. A request seen before is answered from the store,
/// so a recorded run and its replay see exactly the same responses even when
/// the live backend is non-deterministic.
pub struct RecordingBackend<B> {
    inner: B,
    state: Mutex<RecorderState>,
}

struct RecorderState {
    store: ReplayStore,
    writer: BufWriter<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: &Path) -> Result<Self, LlmError> {
        let store = ReplayStore::open(path)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(RecordingBackend {
            inner,
            state: Mutex::new(RecorderState {
                store,
                writer: BufWriter::new(file),
            }),
        })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(hit) = self.state.lock().unwrap().store.get(&key) {
            return Ok(hit.clone());
        }
        // The lock is not held across the backend call; two racing identical
        // requests both reach the backend but only the first is stored.
        let response = self.inner.complete(request)?;
        let mut state = self.state.lock().unwrap();
        if let Some(hit) = state.store.get(&key) {
            return Ok(hit.clone());
        }
        let entry = StoreEntry {
            key: key.clone(),
            tag: request.tag.clone(),
            request: request.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| LlmError::Store(e.to_string()))?;
        let path = state.store.path.clone();
        writeln!(state.writer, "{line}").map_err(|e| io_err(&path, e))?;
        state.writer.flush().map_err(|e| io_err(&path, e))?;
        state.store.entries.insert(key, response.clone());
        Ok(response)
    }
}

/// Serves responses from a store and fails on anything unrecorded.
pub struct ReplayBackend {
    store: ReplayStore,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        if !path.exists() {
            return Err(LlmError::Store(format!("{}: replay store missing", path.display())));
        }
        Ok(ReplayBackend {
            store: ReplayStore::open(path)?,
        })
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        self.store.get(&key).cloned().ok_or(LlmError::ReplayMiss {
            key,
            tag: request.tag.clone(),
        })
    }
}

/// Wraps `inner` for recording, or ignores it and replays from `path`.
pub fn open_replay(
    mode: ReplayMode,
    path: &Path,
    inner: Arc<dyn ChatBackend>,
) -> Result<Arc<dyn ChatBackend>, LlmError> {
    Ok(match mode {
        ReplayMode::Record => Arc::new(RecordingBackend::new(inner, path)?),
        ReplayMode::Replay => Arc::new(ReplayBackend::open(path)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counter(AtomicUsize);

    impl ChatBackend for Counter {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, LlmError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok(ChatResponse::text(format!("response {n}")))
        }
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let req_a = ChatRequest::new("a", "s").with_user("one");
        let req_b = ChatRequest::new("b", "s").with_user("two");
        {
            let rec = RecordingBackend::new(Counter(AtomicUsize::new(0)), &path).unwrap();
            assert_eq!(rec.complete(&req_a).unwrap().text, "response 0");
            assert_eq!(rec.complete(&req_b).unwrap().text, "response 1");
            // memoized: the live backend is not consulted again
            assert_eq!(rec.complete(&req_a).unwrap().text, "response 0");
        }
        let replay = ReplayBackend::open(&path).unwrap();
        assert_eq!(replay.complete(&req_a).unwrap().text, "response 0");
        assert_eq!(replay.complete(&req_b).unwrap().text, "response 1");

        let mutated = ChatRequest::new("a", "s").with_user("one!");
        assert!(matches!(replay.complete(&mutated), Err(LlmError::ReplayMiss { .. })));
    }

    #[test]
    fn replay_requires_existing_store() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ReplayBackend::open(&dir.path().join("nope.jsonl")).is_err());
    }
}
