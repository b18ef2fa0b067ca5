//! Versioned binary snapshot of a built BM25 + dense index pair.
//!
//! Layout (integers little-endian, strings as `u32 length + UTF-8 bytes`):
//!
//! ```text
//! magic        8 bytes "RCHKIDX\0"
//! version      u32
//! k1, b        f64, f64
//! tokenizer    u8   (bit 0 stopwords, bit 1 stem)
//! records      u64, then per record: doc_id str, chunk_index u64, length u32
//! terms        u64, then per term (sorted): term str, n u32, n * (record u32, tf u32)
//! dim          u32
//! rows         u64, then per row: record u64, dim * f32
//! ```
//!
//! Dense rows refer to records by number, so the two indexes always cover
//! the same key universe.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{Bm25Index, Bm25Params, ChunkKey, DenseIndex};
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::text::LexicalTokenizer;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"RCHKIDX\0";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSnapshot {
    pub bm25: Bm25Index,
    pub dense: DenseIndex,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl IndexSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let bm = &self.bm25;
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&bm.params.k1.to_le_bytes());
        out.extend_from_slice(&bm.params.b.to_le_bytes());
        out.push(u8::from(bm.tokenizer.stopwords) | (u8::from(bm.tokenizer.stem) << 1));

        out.extend_from_slice(&(bm.keys.len() as u64).to_le_bytes());
        for (key, len) in bm.keys.iter().zip(&bm.lengths) {
            put_str(&mut out, &key.doc_id);
            out.extend_from_slice(&(key.chunk_index as u64).to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }

        out.extend_from_slice(&(bm.postings.len() as u64).to_le_bytes());
        for (term, list) in &bm.postings {
            put_str(&mut out, term);
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for (id, tf) in list {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&tf.to_le_bytes());
            }
        }

        let record_of: HashMap<&ChunkKey, u64> = bm
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k, i as u64))
            .collect();
        out.extend_from_slice(&(self.dense.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.dense.keys.len() as u64).to_le_bytes());
        for (i, key) in self.dense.keys.iter().enumerate() {
            out.extend_from_slice(&record_of[key].to_le_bytes());
            for x in self.dense.row(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "index snapshot",
            message,
        };
        let trunc = || bad("truncated".into());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(trunc)? != SNAPSHOT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().ok_or_else(trunc)?;
        if version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let params = Bm25Params {
            k1: r.f64().ok_or_else(trunc)?,
            b: r.f64().ok_or_else(trunc)?,
        };
        let flags = r.take(1).ok_or_else(trunc)?[0];
        let tokenizer = LexicalTokenizer {
            stopwords: flags & 1 != 0,
            stem: flags & 2 != 0,
        };
        let read_str = |r: &mut Reader| -> Result<String> {
            let n = r.u32().ok_or_else(trunc)? as usize;
            let raw = r.take(n).ok_or_else(trunc)?;
            String::from_utf8(raw.to_vec()).map_err(|e| bad(e.to_string()))
        };

        let n_records = r.u64().ok_or_else(trunc)? as usize;
        let mut keys = Vec::with_capacity(n_records.min(1 << 20));
        let mut lengths = Vec::with_capacity(n_records.min(1 << 20));
        for _ in 0..n_records {
            let doc_id = read_str(&mut r)?;
            let chunk_index = r.u64().ok_or_else(trunc)? as usize;
            keys.push(ChunkKey {
                doc_id,
                chunk_index,
            });
            lengths.push(r.u32().ok_or_else(trunc)?);
        }

        let n_terms = r.u64().ok_or_else(trunc)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = read_str(&mut r)?;
            let n = r.u32().ok_or_else(trunc)? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let id = r.u32().ok_or_else(trunc)?;
                if id as usize >= n_records {
                    return Err(bad(format!("posting refers to record {id}")));
                }
                list.push((id, r.u32().ok_or_else(trunc)?));
            }
            postings.insert(term, list);
        }

        let dim = r.u32().ok_or_else(trunc)? as usize;
        let n_rows = r.u64().ok_or_else(trunc)? as usize;
        let mut dense = DenseIndex::new(dim);
        for _ in 0..n_rows {
            let rec = r.u64().ok_or_else(trunc)? as usize;
            let key = keys
                .get(rec)
                .ok_or_else(|| bad(format!("row refers to record {rec}")))?;
            let raw = r.take(dim * 4).ok_or_else(trunc)?;
            let row: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            dense.add(key.clone(), &row)?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }

        let total_len = lengths.iter().map(|&l| u64::from(l)).sum();
        Ok(IndexSnapshot {
            bm25: Bm25Index {
                params,
                tokenizer,
                keys,
                lengths,
                postings,
                total_len,
            },
            dense,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
