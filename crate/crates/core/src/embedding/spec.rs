//! Textual provider selection shared by the command line and the service.
//!
//! Accepted forms: `hash:DIM:SEED`, `file:PATH` (JSONL table) and an
//! `http://` or `https://` URL.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use super::{Embedder, EmbeddingCache, EmbeddingProvider, FileProvider, HashProvider, HttpProvider};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Hash { dim: usize, seed: u64 },
    File(PathBuf),
    Http { url: String, id: Option<String> },
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Self::Http { url: s.to_string(), id: None });
        }
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(Error::Config("file provider needs a path".into()));
            }
            return Ok(Self::File(PathBuf::from(path)));
        }
        if let Some(rest) = s.strip_prefix("hash:") {
            let bad = || Error::Config(format!("expected hash:DIM:SEED, got `{s}`"));
            let (dim, seed) = rest.split_once(':').ok_or_else(bad)?;
            let dim: usize = dim.parse().map_err(|_| bad())?;
            let seed: u64 = seed.parse().map_err(|_| bad())?;
            if dim == 0 {
                return Err(Error::Config("hash provider dimension must be positive".into()));
            }
            return Ok(Self::Hash { dim, seed });
        }
        Err(Error::Config(format!(
            "unrecognised embedding provider `{s}` (use hash:DIM:SEED, file:PATH or an http(s) URL)"
        )))
    }
}

impl ProviderSpec {
    /// Names the model behind an HTTP endpoint; ignored for other kinds.
    pub fn with_id(self, id: Option<String>) -> Self {
        match self {
            Self::Http { url, .. } => Self::Http { url, id },
            other => other,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(match self {
            Self::Hash { dim, seed } => Arc::new(HashProvider::new(*dim, *seed)),
            Self::File(path) => Arc::new(FileProvider::load(path)?),
            Self::Http { url, id } => {
                let p = HttpProvider::new(url.clone());
                Arc::new(match id {
                    Some(id) => p.with_id(id.clone()),
                    None => p,
                })
            }
        })
    }

    /// Provider behind a cache resolved from `cache_dir` and the environment.
    pub fn embedder(&self, cache_dir: Option<&Path>) -> Result<Embedder> {
        Ok(Embedder::new(self.build()?, EmbeddingCache::resolve(cache_dir)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_form() {
        assert_eq!("hash:32:7".parse::<ProviderSpec>().unwrap(), ProviderSpec::Hash { dim: 32, seed: 7 });
        assert_eq!("file:/tmp/x.jsonl".parse::<ProviderSpec>().unwrap(), ProviderSpec::File("/tmp/x.jsonl".into()));
        assert_eq!(
            "http://localhost:9/embed".parse::<ProviderSpec>().unwrap(),
            ProviderSpec::Http { url: "http://localhost:9/embed".into(), id: None }
        );
        for bad in ["hash:0:1", "hash:8", "hash:a:b", "file:", "ftp://x", ""] {
            assert!(bad.parse::<ProviderSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_spec_id_matches_provider() {
        let e = ProviderSpec::Hash { dim: 16, seed: 3 }.build().unwrap();
        assert_eq!(e.id(), HashProvider::new(16, 3).id());
    }
}
