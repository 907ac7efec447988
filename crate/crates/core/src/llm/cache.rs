use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    hash: String,
    model: String,
    reply: String,
}

/// Hex SHA-256 of `model`, a NUL byte, and `prompt`.
pub fn cache_key(model: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Replies keyed by (model, prompt hash), optionally backed by an
/// append-only JSONL file. Lookups share a read lock; appends serialize.
#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    /// Load `path` if it exists (bad lines are skipped with a warning) and
    /// append new entries to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        entries.insert(e.hash, e.reply);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache line ({e})", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model: &str, prompt: &str) -> Option<String> {
        self.entries.read().unwrap().get(&cache_key(model, prompt)).cloned()
    }

    pub fn put(&self, model: &str, prompt: &str, reply: &str) -> Result<()> {
        let hash = cache_key(model, prompt);
        let mut writer = self.writer.lock().unwrap();
        if self.entries.read().unwrap().contains_key(&hash) {
            return Ok(());
        }
        if let (Some(f), Some(path)) = (writer.as_mut(), &self.path) {
            let line = serde_json::to_string(&Entry {
                hash: hash.clone(),
                model: model.to_string(),
                reply: reply.to_string(),
            })
            .expect("cache entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.entries.write().unwrap().insert(hash, reply.to_string());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_separates_model_and_prompt() {
        assert_ne!(cache_key("ab", "c"), cache_key("a", "bc"));
        assert_eq!(cache_key("m", "p").len(), 64);
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let c = ResponseCache::open(&path).unwrap();
            assert!(c.get("m", "p").is_none());
            c.put("m", "p", "(A)").unwrap();
            c.put("m", "p", "(B)").unwrap();
            assert_eq!(c.get("m", "p").as_deref(), Some("(A)"));
        }
        std::fs::write(
            &path,
            std::fs::read_to_string(&path).unwrap() + "not json\n",
        )
        .unwrap();
        let c = ResponseCache::open(&path).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get("m", "p").as_deref(), Some("(A)"));
        assert!(c.get("other", "p").is_none());
    }
}
