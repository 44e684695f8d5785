//! Shared versioned key-value cache: one job publishes, others poll.
//!
//! Entries are ephemeral (rebuilt by their producing job on restart) and
//! versioned so pollers can ask "anything newer than what I have?" without
//! re-transferring the value.

use std::collections::HashMap;

use parking_lot::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache key must be non-empty")]
    EmptyKey,
    #[error("remote cache error (code {code:#04x}): {message}")]
    Remote { code: u8, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: String,
    pub value: Vec<u8>,
    /// 1 on first put, +1 on every overwrite of the same key. Never decreases.
    pub version: u64,
    pub updated_at_ms: i64,
}

/// Operation surface shared by the in-process cache and the wire client.
pub trait CacheApi: Send + Sync {
    fn put(&self, key: &str, value: Vec<u8>) -> Result<u64, CacheError>;
    fn get(&self, key: &str) -> Result<Option<CacheEntry>, CacheError>;
    /// `None` is the unchanged marker: current version <= `than`, or the key
    /// is absent.
    fn get_if_newer(&self, key: &str, than: u64) -> Result<Option<CacheEntry>, CacheError>;
}

#[derive(Default)]
pub struct StateCache {
    entries: Mutex<HashMap<String, CacheEntry>>,
}

impl StateCache {
    pub fn new() -> Self {
        Self::default()
    }
}

impl CacheApi for StateCache {
    fn put(&self, key: &str, value: Vec<u8>) -> Result<u64, CacheError> {
        if key.is_empty() {
            return Err(CacheError::EmptyKey);
        }
        let mut entries = self.entries.lock();
        let version = entries.get(key).map(|e| e.version + 1).unwrap_or(1);
        entries.insert(
            key.to_string(),
            CacheEntry {
                key: key.to_string(),
                value,
                version,
                updated_at_ms: chrono::Utc::now().timestamp_millis(),
            },
        );
        Ok(version)
    }

    fn get(&self, key: &str) -> Result<Option<CacheEntry>, CacheError> {
        Ok(self.entries.lock().get(key).cloned())
    }

    fn get_if_newer(&self, key: &str, than: u64) -> Result<Option<CacheEntry>, CacheError> {
        Ok(self
            .entries
            .lock()
            .get(key)
            .filter(|e| e.version > than)
            .cloned())
    }
}
