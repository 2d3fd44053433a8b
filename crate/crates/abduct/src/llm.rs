//! Chat-completion clients: an HTTP client for OpenAI-style endpoints, a
//! fixture replayer and a recorder that produces fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use abductive_core::hypothesis::{ChatClient, ChatRequest, ClientError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoError, Result};

pub const API_KEY_ENV: &str = "ABDUCT_LLM_API_KEY";

/// Hex sha256 of the request's canonical text.
pub fn request_digest(req: &ChatRequest) -> String {
    hex::encode(Sha256::digest(req.canonical().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

pub struct HttpChatClient {
    cfg: HttpClientConfig,
    key: String,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatClient").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

/// Pulls the first choice's text out of a response body.
pub fn parse_completion(body: &str) -> std::result::Result<String, ClientError> {
    let r: WireResponse = serde_json::from_str(body).map_err(|e| ClientError::Malformed(e.to_string()))?;
    r.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| ClientError::Malformed("no choices[0].message.content".into()))
}

fn retryable(e: &ClientError) -> bool {
    match e {
        ClientError::Timeout | ClientError::Transport(_) => true,
        ClientError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl HttpChatClient {
    /// Reads the API key from the environment.
    pub fn from_env(cfg: HttpClientConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| IoError::Config(format!("{API_KEY_ENV} is not set")))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| IoError::Config(format!("http client: {e}")))?;
        Ok(Self { cfg, key, http })
    }

    fn attempt(&self, req: &ChatRequest) -> std::result::Result<String, ClientError> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let resp = self.http.post(url).bearer_auth(&self.key).json(req).send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout
            } else {
                ClientError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: body.chars().take(512).collect(),
            });
        }
        parse_completion(&body)
    }
}

impl ChatClient for HttpChatClient {
    fn model_name(&self) -> &str {
        &self.cfg.model
    }

    /// Retries timeouts, transport errors, 429 and 5xx with exponential
    /// backoff; other failures return at once.
    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ClientError> {
        let mut attempt = 0;
        loop {
            match self.attempt(req) {
                Err(e) if retryable(&e) && attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_ms << attempt.min(10);
                    log::warn!("llm request failed ({e}); retry {} in {wait} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub request_digest: String,
    #[serde(default)]
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn read_fixture(path: &Path) -> Result<Vec<FixtureEntry>> {
    let text = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::doc(path, e.to_string()))
}

pub fn write_fixture(path: &Path, entries: &[FixtureEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| IoError::at(path, e))
}

/// Replays a fixture strictly in order; each request must match the
/// recorded digest.
#[derive(Debug)]
pub struct MockChatClient {
    model: String,
    entries: Vec<FixtureEntry>,
    next: Mutex<usize>,
}

impl MockChatClient {
    pub fn new(model: impl Into<String>, entries: Vec<FixtureEntry>) -> Self {
        Self {
            model: model.into(),
            entries,
            next: Mutex::new(0),
        }
    }

    pub fn from_file(model: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self::new(model, read_fixture(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.next.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl ChatClient for MockChatClient {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ClientError> {
        let mut next = self.next.lock().unwrap_or_else(|p| p.into_inner());
        let index = *next;
        let entry = self.entries.get(index).ok_or(ClientError::FixtureExhausted(self.entries.len()))?;
        *next += 1;
        if entry.request_digest != request_digest(req) {
            return Err(ClientError::FixtureMismatch { index });
        }
        match &entry.error {
            Some(e) => Err(ClientError::Recorded(e.clone())),
            None => Ok(entry.response_text.clone()),
        }
    }
}

/// Wraps a client and records every exchange as a fixture entry.
pub struct RecordingClient {
    inner: Box<dyn ChatClient>,
    log: Mutex<Vec<FixtureEntry>>,
    path: PathBuf,
}

impl RecordingClient {
    pub fn new(inner: Box<dyn ChatClient>, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
            path: path.into(),
        }
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn save(&self) -> Result<()> {
        write_fixture(&self.path, &self.entries())
    }
}

impl ChatClient for RecordingClient {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ClientError> {
        let out = self.inner.complete(req);
        let entry = FixtureEntry {
            request_digest: request_digest(req),
            response_text: out.as_ref().cloned().unwrap_or_default(),
            error: out.as_ref().err().map(|e| e.to_string()),
        };
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(entry);
        out
    }

    fn max_retries(&self) -> u32 {
        self.inner.max_retries()
    }
}
