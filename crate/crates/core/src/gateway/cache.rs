use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{request_fingerprint, ChatBackend, ChatCompletion, ChatExchange, GatewayError};

/// One cached response, stored as `<dir>/<fingerprint>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub fingerprint: String,
    pub request: ChatExchange,
    pub completion: ChatCompletion,
}

/// Directory of JSON cache entries keyed by request fingerprint.
#[derive(Debug)]
pub struct CacheStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl CacheStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    fn cache_err(path: &Path, e: impl std::fmt::Display) -> GatewayError {
        GatewayError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    fn lock_for(&self, fingerprint: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(fingerprint.to_string())
            .or_default()
            .clone()
    }

    pub fn get(&self, fingerprint: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let path = self.path_for(fingerprint);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Self::cache_err(&path, e)),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Self::cache_err(&path, e))
    }

    /// Writes atomically (temp file + rename); writers of one fingerprint
    /// are serialized.
    pub fn put(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let lock = self.lock_for(&entry.fingerprint);
        let _guard = lock.lock().unwrap();
        let path = self.path_for(&entry.fingerprint);
        fs::create_dir_all(&self.dir).map_err(|e| Self::cache_err(&self.dir, e))?;
        let mut body = serde_json::to_string_pretty(entry).map_err(|e| Self::cache_err(&path, e))?;
        body.push('\n');
        let tmp = path.with_extension(format!("json.tmp{}", std::process::id()));
        fs::write(&tmp, body).map_err(|e| Self::cache_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Self::cache_err(&path, e))
    }

    /// All entries, sorted by fingerprint.
    pub fn entries(&self) -> Result<Vec<CacheEntry>, GatewayError> {
        let read = match fs::read_dir(&self.dir) {
            Ok(read) => read,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::cache_err(&self.dir, e)),
        };
        let mut names: Vec<String> = read
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        names.sort();
        names.iter().filter_map(|fp| self.get(fp).transpose()).collect()
    }
}

/// Serves only from the cache; a miss is an error.
pub struct ReplayBackend {
    store: CacheStore,
}

impl ReplayBackend {
    pub fn new(store: CacheStore) -> Self {
        Self { store }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        let fingerprint = request_fingerprint(exchange);
        match self.store.get(&fingerprint)? {
            Some(entry) => Ok(entry.completion),
            None => Err(GatewayError::CacheMiss { fingerprint }),
        }
    }
}

/// Serves cache hits and forwards misses to `inner`, persisting each new
/// response before returning it.
pub struct RecordBackend<B> {
    inner: B,
    store: CacheStore,
}

impl<B: ChatBackend> RecordBackend<B> {
    pub fn new(inner: B, store: CacheStore) -> Self {
        Self { inner, store }
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }
}

impl<B: ChatBackend> ChatBackend for RecordBackend<B> {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        let fingerprint = request_fingerprint(exchange);
        if let Some(entry) = self.store.get(&fingerprint)? {
            return Ok(entry.completion);
        }
        let completion = self.inner.complete(exchange)?;
        self.store.put(&CacheEntry {
            fingerprint,
            request: exchange.clone(),
            completion: completion.clone(),
        })?;
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, FnBackend};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn exchange(text: &str) -> ChatExchange {
        ChatExchange {
            messages: vec![ChatMessage::user(text)],
            n: 3,
            temperature: 1.0,
            model_name: "m".into(),
            max_output_tokens: 8,
        }
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let calls = AtomicUsize::new(0);
        let live = FnBackend(|ex: &ChatExchange| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(ChatCompletion {
                texts: (0..ex.n)
                    .map(|i| format!("{} #{i}\n", ex.last_user_content()))
                    .collect(),
                usage: None,
            })
        });
        let recorder = RecordBackend::new(live, CacheStore::new(dir.path()));
        let recorded = recorder.complete(&exchange("q")).unwrap();
        recorder.complete(&exchange("q")).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        let replay = ReplayBackend::new(CacheStore::new(dir.path()));
        assert_eq!(replay.complete(&exchange("q")).unwrap(), recorded);
        assert_eq!(replay.complete(&exchange("q")).unwrap(), recorded);
        let miss = replay.complete(&exchange("other")).unwrap_err();
        let expected = request_fingerprint(&exchange("other"));
        assert!(matches!(miss, GatewayError::CacheMiss { fingerprint } if fingerprint == expected));
    }

    #[test]
    fn entries_lists_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::new(dir.path());
        for t in ["b", "a", "c"] {
            let ex = exchange(t);
            store
                .put(&CacheEntry {
                    fingerprint: request_fingerprint(&ex),
                    request: ex,
                    completion: ChatCompletion {
                        texts: vec![],
                        usage: None,
                    },
                })
                .unwrap();
        }
        let entries = store.entries().unwrap();
        assert_eq!(entries.len(), 3);
        assert!(entries.windows(2).all(|w| w[0].fingerprint < w[1].fingerprint));
    }
}
