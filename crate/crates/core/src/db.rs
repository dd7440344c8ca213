//! Plaintext reverse index and its on-disk format.
//!
//! File layout (little-endian): magic `LSDB`, `u32` version, `u64` keyword
//! count, then per keyword a 32-byte token, a `u64` list length and the ids.

use std::collections::BTreeMap;
use std::path::Path;

use crate::crypto::{Tag, TAG_LEN};
use crate::error::{Error, Result};

pub const DB_MAGIC: &[u8; 4] = b"LSDB";
pub const DB_VERSION: u32 = 1;

/// Keyword tokens mapped to identifier lists, iterated in token order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Database {
    lists: BTreeMap<Tag, Vec<u64>>,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: Tag, ids: Vec<u64>) {
        self.lists.insert(token, ids);
    }

    pub fn get(&self, token: &Tag) -> Option<&[u64]> {
        self.lists.get(token).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tag, &[u64])> {
        self.lists.iter().map(|(t, v)| (t, v.as_slice()))
    }

    pub fn keywords(&self) -> impl Iterator<Item = &Tag> {
        self.lists.keys()
    }

    pub fn num_keywords(&self) -> usize {
        self.lists.len()
    }

    pub fn total_ids(&self) -> u64 {
        self.lists.values().map(|v| v.len() as u64).sum()
    }

    pub fn max_len(&self) -> usize {
        self.lists.values().map(|v| v.len()).max().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.lists.len() * 40 + 8 * self.total_ids() as usize);
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.lists.len() as u64).to_le_bytes());
        for (t, ids) in &self.lists {
            out.extend_from_slice(&t.0);
            out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
            for id in ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Protocol(format!("database file: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != DB_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != DB_VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut db = Database::new();
        for _ in 0..count {
            let tag = Tag(take(TAG_LEN)?.try_into().unwrap());
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(len.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
            let ids = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            db.insert(tag, ids);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(db)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
