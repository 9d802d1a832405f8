//! Content-addressed disk cache for backend responses.
//!
//! One file per response under two-level fan-out directories. Writers go
//! through a temp file and an atomic rename, so concurrent annotation workers
//! can race on the same key safely.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

pub struct ResponseCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// Key = hash(template fingerprint, rendered user content, backend
    /// identity). Changing any component changes the key.
    pub fn key(template_fingerprint: &str, user_content: &str, backend_identity: &str) -> String {
        let mut h = Sha256::new();
        h.update(template_fingerprint.as_bytes());
        h.update([0]);
        h.update(user_content.as_bytes());
        h.update([0]);
        h.update(backend_identity.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(key)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        match fs::read_to_string(self.path_for(key)) {
            Ok(text) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(text)
            }
            Err(_) => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, key: &str, value: &str) -> Result<()> {
        static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);
        let path = self.path_for(key);
        let parent = path.parent().expect("fan-out parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{}.tmp-{}-{}",
            key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, value)?;
        fs::rename(&tmp, &path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::Io(e)
        })?;
        Ok(())
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stores_and_recalls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = ResponseCache::key("fp", "caption", "mock");
        assert_eq!(cache.get(&key), None);
        cache.put(&key, "response").unwrap();
        assert_eq!(cache.get(&key).as_deref(), Some("response"));
        assert_eq!(cache.hits(), 1);
        assert_eq!(cache.misses(), 1);
    }

    #[test]
    fn key_depends_on_every_component() {
        let base = ResponseCache::key("fp", "caption", "mock");
        assert_ne!(base, ResponseCache::key("fp2", "caption", "mock"));
        assert_ne!(base, ResponseCache::key("fp", "caption2", "mock"));
        assert_ne!(base, ResponseCache::key("fp", "caption", "http:x:y"));
    }

    #[test]
    fn concurrent_writers_do_not_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = ResponseCache::key("fp", "same", "mock");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| cache.put(&key, "value").unwrap());
            }
        });
        assert_eq!(cache.get(&key).as_deref(), Some("value"));
    }
}
