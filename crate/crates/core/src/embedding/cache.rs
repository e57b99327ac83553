use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use crate::error::Result;

/// Overrides the configured cache directory when set.
pub const CACHE_DIR_ENV: &str = "ACCEL_EMBED_CACHE";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// Content-addressed vector store keyed by (provider id, normalized text).
///
/// Each vector lives in `<dir>/<hh>/<sha256>.f64` as raw little-endian
/// doubles. Reads go through an in-memory map; disk writes are serialized.
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, Arc<[f64]>>>,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            mem: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            ..Self::in_memory()
        })
    }

    /// Uses `configured` if given, else `$ACCEL_EMBED_CACHE` if set, else
    /// memory only.
    pub fn resolve(configured: Option<&Path>) -> Result<Self> {
        if let Some(dir) = configured {
            return Self::on_disk(dir);
        }
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::on_disk(PathBuf::from(dir)),
            _ => Ok(Self::in_memory()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn key(provider_id: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(provider_id.as_bytes());
        h.update([0x1f]);
        h.update(text.as_bytes());
        hex(&h.finalize())
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<Arc<[f64]>> {
        let key = Self::key(provider_id, text);
        if let Some(v) = self.mem.read().expect("cache lock poisoned").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Some(v.clone());
        }
        if let Some(v) = self.dir.as_ref().and_then(|d| read_vector(&path_for(d, &key))) {
            let v: Arc<[f64]> = v.into();
            self.mem
                .write()
                .expect("cache lock poisoned")
                .insert(key, v.clone());
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Some(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        None
    }

    pub fn put(&self, provider_id: &str, text: &str, vector: &[f64]) -> Result<()> {
        let key = Self::key(provider_id, text);
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        if let Some(dir) = &self.dir {
            let path = path_for(dir, &key);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let tmp = path.with_extension("tmp");
            let mut f = fs::File::create(&tmp)?;
            let mut buf = Vec::with_capacity(vector.len() * 8);
            for x in vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            f.write_all(&buf)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)?;
        }
        self.mem
            .write()
            .expect("cache lock poisoned")
            .insert(key, vector.into());
        Ok(())
    }
}

fn path_for(dir: &Path, key: &str) -> PathBuf {
    dir.join(&key[..2]).join(format!("{key}.f64"))
}

fn read_vector(path: &Path) -> Option<Vec<f64>> {
    let bytes = fs::read(path).ok()?;
    if bytes.is_empty() || bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let v = [0.1, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300];
        {
            let c = EmbeddingCache::on_disk(dir.path()).unwrap();
            c.put("p", "hello", &v).unwrap();
        }
        let c = EmbeddingCache::on_disk(dir.path()).unwrap();
        let got = c.get("p", "hello").unwrap();
        for (a, b) in got.iter().zip(&v) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(c.stats(), CacheStats { hits: 1, misses: 0 });
    }

    #[test]
    fn provider_is_part_of_the_key() {
        let c = EmbeddingCache::in_memory();
        c.put("model-a", "x", &[1.0]).unwrap();
        assert!(c.get("model-b", "x").is_none());
        assert!(c.get("model-a", "x").is_some());
    }
}
