//! On-disk chunk embedding cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RCHKEMB\0"
//! version  u32
//! dim      u32
//! count    u64
//! rows     count * dim * f32
//! table    count * (key [u8; 32], row u64, flags u8)
//! ```
//!
//! Keys are SHA-256 digests of the content that produced the vector, so a
//! stale entry can never be served for changed input. Flag bit 0 marks a
//! zero-vector sentinel, bit 1 a vector computed from truncated input.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::Reader;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"RCHKEMB\0";
pub const CACHE_VERSION: u32 = 1;

const FLAG_SENTINEL: u8 = 1;
const FLAG_TRUNCATED: u8 = 2;

pub type CacheKey = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    vector: Vec<f32>,
    flags: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CachedVector<'a> {
    pub vector: &'a [f32],
    pub sentinel: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    entries: BTreeMap<CacheKey, Entry>,
    dirty: bool,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            entries: BTreeMap::new(),
            dirty: false,
        }
    }

    /// Digest of length-prefixed parts.
    pub fn key(parts: &[&[u8]]) -> CacheKey {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        h.finalize().into()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn get(&self, key: &CacheKey) -> Option<CachedVector<'_>> {
        self.entries.get(key).map(|e| CachedVector {
            vector: &e.vector,
            sentinel: e.flags & FLAG_SENTINEL != 0,
            truncated: e.flags & FLAG_TRUNCATED != 0,
        })
    }

    pub fn insert(&mut self, key: CacheKey, vector: Vec<f32>, sentinel: bool, truncated: bool) {
        assert_eq!(vector.len(), self.dim, "cache vector dim mismatch");
        let flags = (u8::from(sentinel) * FLAG_SENTINEL) | (u8::from(truncated) * FLAG_TRUNCATED);
        self.entries.insert(key, Entry { vector, flags });
        self.dirty = true;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * (self.dim * 4 + 41));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in self.entries.values() {
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for (row, (key, e)) in self.entries.iter().enumerate() {
            out.extend_from_slice(key);
            out.extend_from_slice(&(row as u64).to_le_bytes());
            out.push(e.flags);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |message: &str| Error::Format {
            what: "embedding cache",
            message: message.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let count = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let row_bytes = dim.checked_mul(4).ok_or_else(|| bad("dim overflow"))?;
        let body = count
            .checked_mul(row_bytes + 41)
            .ok_or_else(|| bad("count overflow"))?;
        if bytes.len() != 24 + body {
            return Err(bad("length does not match header"));
        }
        let rows: Vec<Vec<f32>> = (0..count)
            .map(|_| {
                r.take(row_bytes)
                    .unwrap()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect();
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let key: CacheKey = r.take(32).unwrap().try_into().unwrap();
            let row = r.u64().unwrap() as usize;
            let flags = r.take(1).unwrap()[0];
            let vector = rows
                .get(row)
                .ok_or_else(|| bad("row index out of range"))?
                .clone();
            entries.insert(
                key,
                Entry {
                    vector,
                    flags: flags & (FLAG_SENTINEL | FLAG_TRUNCATED),
                },
            );
        }
        Ok(EmbeddingCache {
            dim,
            entries,
            dirty: false,
        })
    }

    /// Loads the cache at `path`, or returns an empty cache when the file does
    /// not exist.
    pub fn load_or_new(path: &Path, dim: usize) -> Result<Self> {
        match fs::read(path) {
            Ok(bytes) => {
                let cache = Self::from_bytes(&bytes)?;
                if cache.dim != dim {
                    return Err(Error::Format {
                        what: "embedding cache",
                        message: format!("cache dim {} != provider dim {dim}", cache.dim),
                    });
                }
                Ok(cache)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(dim)),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        self.dirty = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(
            rows in proptest::collection::vec(
                (any::<[u8; 32]>(), proptest::collection::vec(-1.0f32..1.0, 3), any::<bool>(), any::<bool>()),
                0..20,
            )
        ) {
            let mut cache = EmbeddingCache::new(3);
            for (k, v, s, t) in rows {
                cache.insert(k, v, s, t);
            }
            let back = EmbeddingCache::from_bytes(&cache.to_bytes()).unwrap();
            prop_assert_eq!(back.entries, cache.entries);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut cache = EmbeddingCache::new(2);
        cache.insert([1; 32], vec![0.5, 0.5], false, true);
        let bytes = cache.to_bytes();
        assert!(EmbeddingCache::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(EmbeddingCache::from_bytes(&wrong_magic).is_err());
    }

    #[test]
    fn key_is_prefix_free() {
        assert_ne!(
            EmbeddingCache::key(&[b"ab", b"c"]),
            EmbeddingCache::key(&[b"a", b"bc"])
        );
    }

    #[test]
    fn missing_file_gives_empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::load_or_new(&dir.path().join("none.bin"), 4).unwrap();
        assert!(cache.is_empty());
    }
}
