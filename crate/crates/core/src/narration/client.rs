//! Chat-completion clients.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::cache::hex;
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    /// sha256 over system, a unit separator, and user. Keys scripted replies.
    pub fn input_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0x1f]);
        h.update(self.user.as_bytes());
        hex(&h.finalize())
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

/// POST `{"system","user","temperature"}` and read `{"text"}`.
pub struct HttpChatClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: url.into(), agent }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        if resp.status() != 200 {
            return Err(Error::Transport(format!("{}: status {}", self.url, resp.status())));
        }
        let body: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("{}: bad response body: {e}", self.url)))?;
        Ok(body.text)
    }
}

#[derive(Debug, Deserialize)]
struct ScriptLine {
    input_hash: String,
    completion: String,
}

/// Deterministic stand-in for a chat model.
///
/// Lookup order: exact input hash, then the next queued reply, then the
/// default reply. With none of these, the call fails with a transport error.
#[derive(Debug, Default)]
pub struct ScriptedChatClient {
    by_hash: HashMap<String, String>,
    queue: Mutex<std::collections::VecDeque<String>>,
    default: Option<String>,
}

impl ScriptedChatClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// JSONL with one `{"input_hash", "completion"}` object per line.
    pub fn load(path: &Path) -> Result<Self> {
        let mut by_hash = HashMap::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            by_hash.insert(entry.input_hash, entry.completion);
        }
        Ok(Self { by_hash, ..Self::default() })
    }

    pub fn with_reply(mut self, request: &ChatRequest, completion: impl Into<String>) -> Self {
        self.by_hash.insert(request.input_hash(), completion.into());
        self
    }

    pub fn with_sequence<I, S>(self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.queue
            .lock()
            .expect("scripted queue poisoned")
            .extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn with_default(mut self, completion: impl Into<String>) -> Self {
        self.default = Some(completion.into());
        self
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        if let Some(c) = self.by_hash.get(&request.input_hash()) {
            return Ok(c.clone());
        }
        if let Some(c) = self.queue.lock().expect("scripted queue poisoned").pop_front() {
            return Ok(c);
        }
        self.default
            .clone()
            .ok_or_else(|| Error::Transport(format!("no scripted reply for input {}", request.input_hash())))
    }
}
