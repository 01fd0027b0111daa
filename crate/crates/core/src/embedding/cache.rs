use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::error::Result;
use crate::jsonl;

/// Content hash of `(model, text)` used as the cache key.
pub fn cache_key(model: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model: String,
    vector: EmbeddingVector,
}

/// Append-only embedding cache. On load, later lines for the same key win.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: HashMap<String, EmbeddingVector>,
    pending: Vec<(String, String)>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the cache backed by `path`, reading it if it exists.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for (_, line) in jsonl::read::<CacheLine>(&path)? {
                entries.insert(line.key, line.vector);
            }
        }
        Ok(Self {
            path: Some(path),
            entries,
            pending: Vec::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model: &str, text: &str) -> Option<&EmbeddingVector> {
        self.entries.get(&cache_key(model, text))
    }

    pub fn insert(&mut self, model: &str, text: &str, vector: EmbeddingVector) {
        let key = cache_key(model, text);
        self.entries.insert(key.clone(), vector);
        self.pending.push((key, model.to_string()));
    }

    /// Appends entries inserted since the last flush to the backing file.
    pub fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            self.pending.clear();
            return Ok(());
        };
        if self.pending.is_empty() {
            return Ok(());
        }
        let lines: Vec<CacheLine> = self
            .pending
            .iter()
            .map(|(key, model)| CacheLine {
                key: key.clone(),
                model: model.clone(),
                vector: self.entries[key].clone(),
            })
            .collect();
        jsonl::append(path, &lines)?;
        self.pending.clear();
        Ok(())
    }
}
