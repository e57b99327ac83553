//! Text embeddings: pluggable providers behind a persistent cache, plus the
//! corpus mean-centering applied to treatment vectors.

pub(crate) mod cache;
mod providers;
mod spec;

use std::sync::{Arc, OnceLock};

use nalgebra::DVector;

pub use cache::{CacheStats, EmbeddingCache, CACHE_DIR_ENV};
pub use providers::{FileProvider, HashProvider, HttpProvider};
pub use spec::ProviderSpec;

use crate::error::{check_dim, Error, Result};
use crate::ingest::normalize_text;

/// Maps a batch of texts to raw vectors.
///
/// Implementations must be deterministic within a session and return one
/// vector per input text in input order.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity of the model behind the provider. Part of every cache key.
    fn id(&self) -> &str;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: DVector<f64>,
    pub provider_id: Arc<str>,
}

impl EmbeddingVector {
    pub fn new(values: DVector<f64>, provider_id: impl Into<Arc<str>>) -> Self {
        Self {
            values,
            provider_id: provider_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Provider plus cache. The embedding dimension is fixed by the first batch
/// and enforced for the rest of the session.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: EmbeddingCache,
    batch_size: usize,
    dim: OnceLock<usize>,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: EmbeddingCache) -> Self {
        Self {
            provider,
            cache,
            batch_size: 64,
            dim: OnceLock::new(),
        }
    }

    /// In-memory cache only.
    pub fn uncached(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self::new(provider, EmbeddingCache::in_memory())
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    /// Embedding dimension, once known.
    pub fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::Validation("cannot embed an empty batch".into()));
        }
        let provider_id: Arc<str> = Arc::from(self.provider.id());
        let normalized: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();

        let mut found: Vec<Option<Arc<[f64]>>> = normalized
            .iter()
            .map(|t| self.cache.get(&provider_id, t))
            .collect();

        let mut missing: Vec<String> = Vec::new();
        for (t, f) in normalized.iter().zip(&found) {
            if f.is_none() && !missing.contains(t) {
                missing.push(t.clone());
            }
        }

        for chunk in missing.chunks(self.batch_size) {
            let vectors = self.provider.embed(chunk)?;
            if vectors.len() != chunk.len() {
                return Err(Error::Config(format!(
                    "provider `{}` returned {} vectors for {} texts",
                    provider_id,
                    vectors.len(),
                    chunk.len()
                )));
            }
            for (text, v) in chunk.iter().zip(vectors) {
                self.check_vector(&v)?;
                self.cache.put(&provider_id, text, &v)?;
            }
        }

        for (slot, t) in found.iter_mut().zip(&normalized) {
            if slot.is_none() {
                *slot = self.cache.get(&provider_id, t);
            }
        }

        found
            .into_iter()
            .zip(&normalized)
            .map(|(v, t)| {
                let v = v.ok_or_else(|| Error::MissingEmbedding(t.clone()))?;
                self.check_vector(&v)?;
                Ok(EmbeddingVector::new(
                    DVector::from_column_slice(&v),
                    provider_id.clone(),
                ))
            })
            .collect()
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "provider `{}` returned an empty or non-finite vector",
                self.provider.id()
            )));
        }
        let dim = *self.dim.get_or_init(|| v.len());
        if dim != v.len() {
            return Err(Error::Config(format!(
                "provider `{}` changed dimension mid-session: {} then {}",
                self.provider.id(),
                dim,
                v.len()
            )));
        }
        Ok(())
    }
}

/// Mean of the centering corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringStats {
    pub mean: DVector<f64>,
    pub corpus_size: usize,
    pub corpus_tag: String,
}

impl CenteringStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_centering(corpus: &[EmbeddingVector], tag: impl Into<String>) -> Result<CenteringStats> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Validation("centering corpus is empty".into()))?;
    let p = first.dim();
    let mut sum = DVector::zeros(p);
    for v in corpus {
        check_dim(p, v.dim())?;
        sum += &v.values;
    }
    Ok(CenteringStats {
        mean: sum / corpus.len() as f64,
        corpus_size: corpus.len(),
        corpus_tag: tag.into(),
    })
}

pub fn center(vector: &EmbeddingVector, stats: &CenteringStats) -> Result<EmbeddingVector> {
    check_dim(stats.dim(), vector.dim())?;
    Ok(EmbeddingVector {
        values: &vector.values - &stats.mean,
        provider_id: vector.provider_id.clone(),
    })
}
