//! Append-only JSONL response cache.
//!
//! Each line is `{"key", "prompt", "params", "output", "latency_ms"}` where
//! `key` is the SHA-256 of the prompt bytes, the serialized parameters and
//! the backend id.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, GenParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub prompt: String,
    pub params: GenParams,
    pub output: String,
    pub latency_ms: f64,
}

pub fn cache_key(prompt: &str, params: &GenParams, backend_id: &str) -> String {
    let params_json = serde_json::to_string(params).expect("params serialize");
    let mut h = Sha256::new();
    for part in [
        prompt.as_bytes(),
        params_json.as_bytes(),
        backend_id.as_bytes(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, CacheEntry>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
        }
    }

    /// Loads existing entries; the file is created on first insert.
    /// Unreadable lines are skipped with a warning.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| GatewayError::Cache(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| GatewayError::Cache(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key.clone(), e);
                    }
                    Err(err) => {
                        log::warn!("{}:{}: skipping cache line: {err}", path.display(), n + 1)
                    }
                }
            }
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<(), GatewayError> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| GatewayError::Cache(e.to_string()))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(f, "{line}").map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
