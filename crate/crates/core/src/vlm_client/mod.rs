//! Querying vision-language models, with record/replay.
//!
//! Every response source implements [`ResponseSource`]. The live HTTP
//! client lives in [`http`] (behind the `http` feature); [`ReplaySource`]
//! answers from a transcript store and never touches the network.

#[cfg(feature = "http")]
pub mod http;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// `POST {base_url}/chat/completions`
    OpenaiChat,
    /// `POST {base_url}/messages`
    AnthropicMessages,
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> f64 {
    120.0
}

fn default_max_tokens() -> u32 {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// Report label and transcript-key component.
    pub name: String,
    pub base_url: String,
    pub flavor: Flavor,
    /// Model id sent on the wire; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the API key, if the endpoint needs one.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, flavor: Flavor) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            flavor,
            model: None,
            auth_env: None,
            max_concurrency: default_concurrency(),
            timeout: default_timeout(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 {
            return Err(Error::config(format!("endpoint {}: max_concurrency must be >= 1", self.name)));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(Error::config(format!("endpoint {}: timeout must be > 0", self.name)));
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }
}

/// A recorded exchange; one JSON object per line in a store file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub key: String,
    pub endpoint: String,
    pub response: String,
    pub latency_ms: u64,
    pub ts: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replay key: digest over endpoint name, prompt text and the digest of the
/// raw image bytes. Fields are NUL-separated.
pub fn transcript_key(endpoint: &str, prompt: &str, image: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(endpoint.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(Sha256::digest(image));
    hex::encode(h.finalize())
}

/// Transcript store: many readers, one appending writer.
#[derive(Debug, Default)]
pub struct TranscriptStore {
    entries: HashMap<String, Transcript>,
    path: Option<PathBuf>,
    writer: Option<Mutex<fs::File>>,
}

impl TranscriptStore {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Transcript = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            // later lines win, so re-recording a key overrides it
            entries.insert(t.key.clone(), t);
        }
        Ok(Self {
            entries,
            path: Some(path.to_path_buf()),
            writer: None,
        })
    }

    /// Opens (or creates) a store for appending new transcripts.
    pub fn open_for_append(path: &Path) -> Result<Self> {
        let mut store = if path.exists() {
            Self::load(path)?
        } else {
            Self::default()
        };
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.path = Some(path.to_path_buf());
        store.writer = Some(Mutex::new(file));
        Ok(store)
    }

    pub fn get(&self, key: &str) -> Option<&Transcript> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends to the backing file. Entries recorded this way are not
    /// visible to [`get`](Self::get) until the store is reloaded.
    pub fn append(&self, t: &Transcript) -> Result<()> {
        let path = self.path.clone().unwrap_or_default();
        let writer = self
            .writer
            .as_ref()
            .ok_or_else(|| Error::config("transcript store was not opened for writing"))?;
        let mut line = serde_json::to_string(t).expect("transcript serializes");
        line.push('\n');
        let mut f = writer.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.flush().map_err(|e| Error::io(&path, e))
    }

    /// Writes `transcripts` as a fresh store file.
    pub fn write_all(path: &Path, transcripts: &[Transcript]) -> Result<()> {
        let mut out = String::new();
        for t in transcripts {
            out.push_str(&serde_json::to_string(t).expect("transcript serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Anything that can answer a prompt about a page image.
pub trait ResponseSource: Sync {
    fn respond(&self, endpoint: &ModelEndpoint, prompt: &str, image: &[u8]) -> Result<String>;
}

pub struct ReplaySource {
    pub store: TranscriptStore,
}

impl ReplaySource {
    pub fn new(store: TranscriptStore) -> Self {
        Self { store }
    }
}

pub fn replay_query(
    store: &TranscriptStore,
    endpoint: &ModelEndpoint,
    prompt: &str,
    image: &[u8],
) -> Result<String> {
    let key = transcript_key(&endpoint.name, prompt, image);
    store
        .get(&key)
        .map(|t| t.response.clone())
        .ok_or(Error::ReplayMiss { key, qa_id: None })
}

impl ResponseSource for ReplaySource {
    fn respond(&self, endpoint: &ModelEndpoint, prompt: &str, image: &[u8]) -> Result<String> {
        replay_query(&self.store, endpoint, prompt, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint() -> ModelEndpoint {
        ModelEndpoint::new("qwen", "http://localhost:1/v1", Flavor::OpenaiChat)
    }

    #[test]
    fn key_is_deterministic_and_sensitive() {
        let k = transcript_key("qwen", "prompt", b"img");
        assert_eq!(k, transcript_key("qwen", "prompt", b"img"));
        assert_eq!(k.len(), 64);
        assert_ne!(k, transcript_key("qwen", "prompt ", b"img"));
        assert_ne!(k, transcript_key("qwen", "prompt", b"img2"));
        assert_ne!(k, transcript_key("smol", "prompt", b"img"));
        // field boundaries matter
        assert_ne!(transcript_key("ab", "c", b""), transcript_key("a", "bc", b""));
    }

    #[test]
    fn replay_round_trip_and_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let ep = endpoint();
        let t = Transcript {
            key: transcript_key(&ep.name, "What?", b"page"),
            endpoint: ep.name.clone(),
            response: "{\"content\":\"x\"}\n  trailing ".into(),
            latency_ms: 12,
            ts: "2026-01-01T00:00:00Z".into(),
        };
        TranscriptStore::write_all(&path, std::slice::from_ref(&t)).unwrap();
        let src = ReplaySource::new(TranscriptStore::load(&path).unwrap());

        assert_eq!(src.respond(&ep, "What?", b"page").unwrap(), t.response);
        assert!(matches!(src.respond(&ep, "What?!", b"page"), Err(Error::ReplayMiss { .. })));
        assert!(matches!(src.respond(&ep, "What?", b"page2"), Err(Error::ReplayMiss { .. })));
    }

    #[test]
    fn append_then_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let store = TranscriptStore::open_for_append(&path).unwrap();
        let t = Transcript {
            key: "k".into(),
            endpoint: "e".into(),
            response: "r".into(),
            latency_ms: 1,
            ts: "t".into(),
        };
        store.append(&t).unwrap();
        store.append(&t).unwrap();
        let reloaded = TranscriptStore::load(&path).unwrap();
        assert_eq!(reloaded.len(), 1);
        assert_eq!(reloaded.get("k"), Some(&t));
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = endpoint();
        ep.validate().unwrap();
        ep.max_concurrency = 0;
        assert!(ep.validate().is_err());
        ep.max_concurrency = 1;
        ep.timeout = 0.0;
        assert!(ep.validate().is_err());
    }
}
