use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRequest, ChatResponse, RequestSummary};
use crate::dataset::write_atomic;

/// Contents of one `<digest>.json` cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub request: RequestSummary,
    pub response: ChatResponse,
}

/// Directory of completed responses keyed by request digest. Writers are
/// serialized per key; distinct keys proceed in parallel.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn io_err(path: &Path, e: std::io::Error) -> BackendError {
    BackendError::CacheIo(format!("{}: {e}", path.display()))
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self {
            dir,
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    fn lock_for(&self, digest: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().expect("cache lock map poisoned");
        locks.entry(digest.to_owned()).or_default().clone()
    }

    pub fn get(&self, digest: &str) -> Result<Option<CacheEntry>, BackendError> {
        let path = self.path_for(digest);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| BackendError::CacheIo(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), BackendError> {
        let path = self.path_for(&entry.digest);
        let bytes = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        write_atomic(&path, &bytes).map_err(|e| io_err(&path, e))
    }

    pub fn len(&self) -> Result<usize, BackendError> {
        let entries = fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        Ok(entries
            .filter_map(Result::ok)
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count())
    }

    pub fn is_empty(&self) -> Result<bool, BackendError> {
        self.len().map(|n| n == 0)
    }

    /// Removes every cached response.
    pub fn clear(&self) -> Result<(), BackendError> {
        let entries = fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        for entry in entries.filter_map(Result::ok) {
            let path = entry.path();
            if path.extension().is_some_and(|x| x == "json") {
                fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Returns the cached response for `request` or completes it through
/// `backend` and stores the result. The boolean reports a cache hit.
pub fn cached_complete(
    backend: &Backend,
    request: &ChatRequest,
    cache: &ResponseCache,
) -> Result<(ChatResponse, bool), BackendError> {
    request.validate()?;
    let digest = request.cache_key();
    let lock = cache.lock_for(&digest);
    let _guard = lock.lock().expect("cache key lock poisoned");
    if let Some(entry) = cache.get(&digest)? {
        return Ok((entry.response, true));
    }
    let response = backend.complete(request)?;
    cache.put(&CacheEntry {
        digest,
        request: request.summary(),
        response: response.clone(),
    })?;
    Ok((response, false))
}
