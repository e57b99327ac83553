use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::hex;
use super::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::ingest::normalize_text;

/// Deterministic pseudo-random vectors: the text hash seeds a ChaCha stream of
/// standard normals. Used for property tests and synthetic corpora.
#[derive(Debug, Clone)]
pub struct HashProvider {
    dim: usize,
    seed: u64,
    id: String,
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            id: format!("hash-d{dim}-s{seed}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(normalize_text(text).as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl EmbeddingProvider for HashProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Debug, Deserialize)]
struct FileEntry {
    text: String,
    embedding: Vec<f64>,
}

/// Precomputed embeddings from a JSONL table of `{"text", "embedding"}`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    table: HashMap<String, Vec<f64>>,
    id: String,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let digest = hex(&Sha256::digest(&bytes));
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FileEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let d = *dim.get_or_insert(entry.embedding.len());
            if d != entry.embedding.len() || d == 0 {
                return Err(Error::Config(format!(
                    "{}: line {} has dimension {}, expected {d}",
                    path.display(),
                    i + 1,
                    entry.embedding.len()
                )));
            }
            table.insert(normalize_text(&entry.text), entry.embedding);
        }
        Ok(Self {
            table,
            id: format!("file-{}", &digest[..16]),
        })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>, id: impl Into<String>) -> Self {
        Self {
            table: pairs
                .into_iter()
                .map(|(t, v)| (normalize_text(&t), v))
                .collect(),
            id: id.into(),
        }
    }
}

impl EmbeddingProvider for FileProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(&normalize_text(t))
                    .cloned()
                    .ok_or_else(|| Error::MissingEmbedding(t.clone()))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct HttpResponse {
    embeddings: Vec<Vec<f64>>,
}

/// JSON-over-HTTP provider: POST `{"texts": [...]}`, expects
/// `{"embeddings": [[...], ...]}` with status 200.
pub struct HttpProvider {
    url: String,
    id: String,
    agent: ureq::Agent,
    max_attempts: usize,
    backoff: Duration,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>) -> Self {
        let url = url.into();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: format!("http:{url}"),
            url,
            agent,
            max_attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }

    /// Names the model explicitly so cache entries follow the model, not the URL.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_retries(mut self, max_attempts: usize, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(HttpRequest { texts })
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        if resp.status() != 200 {
            return Err(Error::Transport(format!(
                "{}: status {}",
                self.url,
                resp.status()
            )));
        }
        let body: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("{}: bad response body: {e}", self.url)))?;
        Ok(body.embeddings)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut last = None;
        for attempt in 0..self.max_attempts {
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("embedding request failed (attempt {}): {e}", attempt + 1);
                    last = Some(e);
                    if attempt + 1 < self.max_attempts {
                        thread::sleep(self.backoff * (1 << attempt));
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Transport("no attempts made".into())))
    }
}
