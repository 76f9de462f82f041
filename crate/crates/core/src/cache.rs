//! Query-keyed response cache with single-flight fetches.
//!
//! Payloads are stored byte-for-byte as the upstream returned them. Failed
//! fetches are never stored. Concurrent callers with the same key share one
//! in-flight fetch, so the upstream counter equals the number of distinct keys
//! that were fetched successfully (plus any failed attempts).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;

use crate::http::ServiceError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub payload: String,
    /// Seconds since the Unix epoch.
    pub inserted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
}

/// Canonical cache key: operation name plus parameters sorted by name.
pub fn canonical_key(operation: &str, params: &[(&str, &str)]) -> String {
    let mut sorted: Vec<(&str, &str)> = params.to_vec();
    sorted.sort();
    serde_json::to_string(&(operation, sorted)).expect("string tuples always serialize")
}

#[derive(Debug)]
pub struct ResponseCache {
    enabled: bool,
    slots: Mutex<HashMap<String, Arc<OnceCell<CacheEntry>>>>,
    upstream_calls: AtomicU64,
    hits: AtomicU64,
    store: Option<(PathBuf, Mutex<File>)>,
}

impl Default for ResponseCache {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            enabled: true,
            slots: Mutex::new(HashMap::new()),
            upstream_calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            store: None,
        }
    }

    /// Every call goes upstream; counters still work.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::in_memory()
        }
    }

    /// In-memory cache backed by an append-only JSON-lines file. Existing lines
    /// are loaded first; for a key written twice the first line wins.
    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let cache = Self::in_memory();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut slots = cache.slots.lock().expect("cache lock poisoned");
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) => {
                        slots
                            .entry(entry.key.clone())
                            .or_insert_with(|| Arc::new(OnceCell::new_with(Some(entry))));
                    }
                    Err(e) => tracing::warn!(path = %path.display(), line = n + 1, error = %e, "skipping unreadable cache line"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            store: Some((path.to_path_buf(), Mutex::new(file))),
            ..cache
        })
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Number of times a fetch was actually executed.
    pub fn upstream_calls(&self) -> u64 {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.slots
            .lock()
            .expect("cache lock poisoned")
            .values()
            .filter(|c| c.initialized())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.slots
            .lock()
            .expect("cache lock poisoned")
            .get(key)
            .and_then(|c| c.get().cloned())
    }

    /// Returns the stored payload for `key`, running `fetch` only when nothing
    /// is stored yet.
    pub async fn cached_call<F, Fut>(
        &self,
        key: &str,
        fetch: F,
    ) -> Result<(String, CacheOutcome), ServiceError>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<String, ServiceError>>,
    {
        if !self.enabled {
            self.upstream_calls.fetch_add(1, Ordering::SeqCst);
            return fetch().await.map(|p| (p, CacheOutcome::Miss));
        }

        let cell = {
            let mut slots = self.slots.lock().expect("cache lock poisoned");
            slots.entry(key.to_string()).or_default().clone()
        };
        let mut fetched = false;
        let entry = cell
            .get_or_try_init(|| {
                fetched = true;
                self.upstream_calls.fetch_add(1, Ordering::SeqCst);
                async {
                    let payload = fetch().await?;
                    Ok::<_, ServiceError>(CacheEntry {
                        key: key.to_string(),
                        payload,
                        inserted_at: now_secs(),
                    })
                }
            })
            .await?;

        if fetched {
            self.persist(entry);
            Ok((entry.payload.clone(), CacheOutcome::Miss))
        } else {
            self.hits.fetch_add(1, Ordering::SeqCst);
            Ok((entry.payload.clone(), CacheOutcome::Hit))
        }
    }

    fn persist(&self, entry: &CacheEntry) {
        let Some((path, file)) = &self.store else {
            return;
        };
        let mut line = serde_json::to_string(entry).expect("cache entry serializes");
        line.push('\n');
        let mut file = file.lock().expect("cache file lock poisoned");
        if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
            tracing::warn!(path = %path.display(), error = %e, "could not append to cache file");
        }
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
