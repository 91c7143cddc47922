//! Blocking HTTP client for the two wire flavors, with bounded per-endpoint
//! parallelism, retries and optional transcript recording.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde_json::{json, Value};

use super::{transcript_key, Flavor, ModelEndpoint, ResponseSource, Transcript, TranscriptStore};
use crate::error::{Error, Result};

const ANTHROPIC_VERSION: &str = "2023-06-01";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Backoff before retry `k` (0-based) is drawn uniformly from
    /// `[0, base_delay * 2^k]`.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        let cap = self.base_delay.saturating_mul(1u32 << retry.min(16));
        let nanos = cap.as_nanos().min(u64::MAX as u128) as u64;
        if nanos == 0 {
            return Duration::ZERO;
        }
        Duration::from_nanos(rand::rng().random_range(0..=nanos))
    }
}

/// Counting semaphore.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Retryable { status: Option<u16>, message: String },
    Fatal { status: Option<u16>, message: String },
}

pub struct VlmClient {
    retry: RetryPolicy,
    gates: Mutex<HashMap<String, Arc<Gate>>>,
    recorder: Option<TranscriptStore>,
    retries: AtomicU64,
}

impl Default for VlmClient {
    fn default() -> Self {
        Self::new()
    }
}

impl VlmClient {
    pub fn new() -> Self {
        Self {
            retry: RetryPolicy::default(),
            gates: Mutex::new(HashMap::new()),
            recorder: None,
            retries: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Appends a transcript for every successful query.
    pub fn recording_to(mut self, path: &Path) -> Result<Self> {
        self.recorder = Some(TranscriptStore::open_for_append(path)?);
        Ok(self)
    }

    /// Retries performed so far, across all endpoints.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn gate(&self, ep: &ModelEndpoint) -> Arc<Gate> {
        let mut gates = self.gates.lock().unwrap_or_else(|p| p.into_inner());
        gates
            .entry(ep.name.clone())
            .or_insert_with(|| Arc::new(Gate::new(ep.max_concurrency)))
            .clone()
    }

    pub fn query_file(&self, ep: &ModelEndpoint, prompt: &str, image: &Path) -> Result<String> {
        let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
        self.query(ep, prompt, &bytes, media_type(image))
    }

    /// Sends one prompt plus page image and returns the model's raw text.
    pub fn query(&self, ep: &ModelEndpoint, prompt: &str, image: &[u8], media: &str) -> Result<String> {
        ep.validate()?;
        let api_key = match &ep.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::config(format!("endpoint {}: environment variable {var} is not set", ep.name))
            })?),
            None => None,
        };
        let body = request_body(ep, prompt, image, media).to_string();
        let url = endpoint_url(ep);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(ep.timeout)))
            .http_status_as_error(false)
            .build()
            .into();

        let gate = self.gate(ep);
        let mut last: (Option<u16>, String) = (None, String::new());
        for attempt in 1..=self.retry.max_attempts {
            let started = Instant::now();
            let outcome = {
                let _permit = gate.acquire();
                send_once(&agent, ep, &url, &body, api_key.as_deref())
            };
            match outcome {
                Ok(text) => {
                    if let Some(rec) = &self.recorder {
                        rec.append(&Transcript {
                            key: transcript_key(&ep.name, prompt, image),
                            endpoint: ep.name.clone(),
                            response: text.clone(),
                            latency_ms: started.elapsed().as_millis() as u64,
                            ts: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                        })?;
                    }
                    return Ok(text);
                }
                Err(Failure::Fatal { status, message }) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        status,
                        message,
                    })
                }
                Err(Failure::Retryable { status, message }) => {
                    last = (status, message);
                    if attempt < self.retry.max_attempts {
                        let wait = self.retry.backoff(attempt - 1);
                        log::warn!(
                            "{}: attempt {attempt} failed ({}), retrying in {wait:?}",
                            ep.name,
                            last.1
                        );
                        self.retries.fetch_add(1, Ordering::Relaxed);
                        std::thread::sleep(wait);
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: self.retry.max_attempts,
            status: last.0,
            message: last.1,
        })
    }
}

impl ResponseSource for VlmClient {
    fn respond(&self, endpoint: &ModelEndpoint, prompt: &str, image: &[u8]) -> Result<String> {
        self.query(endpoint, prompt, image, "image/png")
    }
}

pub fn media_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

fn endpoint_url(ep: &ModelEndpoint) -> String {
    let base = ep.base_url.trim_end_matches('/');
    match ep.flavor {
        Flavor::OpenaiChat => format!("{base}/chat/completions"),
        Flavor::AnthropicMessages => format!("{base}/messages"),
    }
}

pub fn request_body(ep: &ModelEndpoint, prompt: &str, image: &[u8], media: &str) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD.encode(image);
    match ep.flavor {
        Flavor::OpenaiChat => json!({
            "model": ep.model_id(),
            "temperature": ep.temperature,
            "max_tokens": ep.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": format!("data:{media};base64,{b64}")}},
                    {"type": "text", "text": prompt},
                ],
            }],
        }),
        Flavor::AnthropicMessages => json!({
            "model": ep.model_id(),
            "temperature": ep.temperature,
            "max_tokens": ep.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image", "source": {"type": "base64", "media_type": media, "data": b64}},
                    {"type": "text", "text": prompt},
                ],
            }],
        }),
    }
}

/// Pulls the answer text out of a flavor's response body.
pub fn response_text(flavor: Flavor, body: &Value) -> Option<String> {
    match flavor {
        Flavor::OpenaiChat => {
            let content = body.pointer("/choices/0/message/content")?;
            match content {
                Value::String(s) => Some(s.clone()),
                // some servers return content parts
                Value::Array(parts) => Some(
                    parts
                        .iter()
                        .filter_map(|p| p.get("text").and_then(Value::as_str))
                        .collect::<Vec<_>>()
                        .join(""),
                ),
                _ => None,
            }
        }
        Flavor::AnthropicMessages => {
            let parts = body.get("content")?.as_array()?;
            Some(
                parts
                    .iter()
                    .filter(|p| p.get("type").and_then(Value::as_str) == Some("text"))
                    .filter_map(|p| p.get("text").and_then(Value::as_str))
                    .collect::<Vec<_>>()
                    .join(""),
            )
        }
    }
}

fn send_once(
    agent: &ureq::Agent,
    ep: &ModelEndpoint,
    url: &str,
    body: &str,
    api_key: Option<&str>,
) -> std::result::Result<String, Failure> {
    let mut req = agent.post(url).header("content-type", "application/json");
    match (ep.flavor, api_key) {
        (Flavor::OpenaiChat, Some(k)) => req = req.header("authorization", &format!("Bearer {k}")),
        (Flavor::AnthropicMessages, key) => {
            req = req.header("anthropic-version", ANTHROPIC_VERSION);
            if let Some(k) = key {
                req = req.header("x-api-key", k);
            }
        }
        _ => {}
    }
    let mut resp = req.send(body).map_err(|e| Failure::Retryable {
        status: None,
        message: e.to_string(),
    })?;
    let status = resp.status().as_u16();
    let mut text = String::new();
    resp.body_mut()
        .as_reader()
        .read_to_string(&mut text)
        .map_err(|e| Failure::Retryable {
            status: Some(status),
            message: format!("reading body: {e}"),
        })?;
    if status == 429 || status >= 500 {
        return Err(Failure::Retryable {
            status: Some(status),
            message: format!("HTTP {status}"),
        });
    }
    if !(200..300).contains(&status) {
        return Err(Failure::Fatal {
            status: Some(status),
            message: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
        });
    }
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal {
        status: Some(status),
        message: format!("response is not JSON: {e}"),
    })?;
    response_text(ep.flavor, &value).ok_or_else(|| Failure::Fatal {
        status: Some(status),
        message: "response has no text content".into(),
    })
}
