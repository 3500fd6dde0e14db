use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionProvider, ComponentModelConfig, GatewayError, ProviderReply};
use crate::prompt::PromptMessages;

const ARCHIVE_FILE: &str = "archive.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    Record,
    Replay,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveLine {
    prompt_hash: String,
    model_id: String,
    response: String,
}

/// SHA-256 over the model id and the serialized messages.
pub fn prompt_hash(messages: &PromptMessages, model_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(messages).expect("messages serialize"));
    hex::encode(h.finalize())
}

/// Archives responses of a wrapped provider (record) or serves them back
/// by prompt hash (replay). The archive is `<dir>/archive.jsonl`, one JSON
/// object per line; the first entry for a hash wins on replay.
pub struct RecordReplayProvider {
    mode: ReplayMode,
    inner: Option<Arc<dyn CompletionProvider>>,
    index: Mutex<HashMap<String, String>>,
    sink: Option<Mutex<File>>,
    path: PathBuf,
}

impl RecordReplayProvider {
    pub fn record(dir: &Path, inner: Arc<dyn CompletionProvider>) -> Result<Self, GatewayError> {
        std::fs::create_dir_all(dir).map_err(|e| GatewayError::Archive(format!("{}: {e}", dir.display())))?;
        let path = dir.join(ARCHIVE_FILE);
        let index = load_index(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| GatewayError::Archive(format!("{}: {e}", path.display())))?;
        Ok(Self {
            mode: ReplayMode::Record,
            inner: Some(inner),
            index: Mutex::new(index),
            sink: Some(Mutex::new(file)),
            path,
        })
    }

    pub fn replay(dir: &Path) -> Result<Self, GatewayError> {
        let path = dir.join(ARCHIVE_FILE);
        if !path.is_file() {
            return Err(GatewayError::Archive(format!("no archive at {}", path.display())));
        }
        let index = load_index(&path)?;
        Ok(Self { mode: ReplayMode::Replay, inner: None, index: Mutex::new(index), sink: None, path })
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn archive_path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn load_index(path: &Path) -> Result<HashMap<String, String>, GatewayError> {
    let mut index = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(index),
        Err(e) => return Err(GatewayError::Archive(format!("{}: {e}", path.display()))),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GatewayError::Archive(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted append is skipped.
        let Ok(entry) = serde_json::from_str::<ArchiveLine>(&line) else {
            tracing::warn!(line = n + 1, archive = %path.display(), "skipping unreadable archive line");
            continue;
        };
        index.entry(entry.prompt_hash).or_insert(entry.response);
    }
    Ok(index)
}

impl CompletionProvider for RecordReplayProvider {
    fn complete(&self, messages: &PromptMessages, cfg: &ComponentModelConfig) -> Result<ProviderReply, GatewayError> {
        let hash = prompt_hash(messages, &cfg.model_id);
        match self.mode {
            ReplayMode::Replay => {
                let index = self.index.lock().unwrap_or_else(|e| e.into_inner());
                index
                    .get(&hash)
                    .map(|text| ProviderReply { text: text.clone(), attempts: 1 })
                    .ok_or(GatewayError::ReplayMiss(hash))
            }
            ReplayMode::Record => {
                let inner = self.inner.as_ref().expect("record mode has an inner provider");
                let reply = inner.complete(messages, cfg)?;
                let line = serde_json::to_string(&ArchiveLine {
                    prompt_hash: hash.clone(),
                    model_id: cfg.model_id.clone(),
                    response: reply.text.clone(),
                })
                .expect("archive line serializes");
                if let Some(sink) = &self.sink {
                    let mut f = sink.lock().unwrap_or_else(|e| e.into_inner());
                    writeln!(f, "{line}")
                        .and_then(|_| f.flush())
                        .map_err(|e| GatewayError::Archive(format!("{}: {e}", self.path.display())))?;
                }
                self.index.lock().unwrap_or_else(|e| e.into_inner()).entry(hash).or_insert(reply.text.clone());
                Ok(reply)
            }
        }
    }
}
