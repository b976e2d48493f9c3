//! Content-addressed response cache: one JSON file per request digest,
//! sharded by the first two hex characters, written via temp-file rename so
//! concurrent writers can never leave a torn entry.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{BackendReply, CacheKey, ChatRequest, Usage};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Serialize, Deserialize)]
pub struct CachedEntry {
    pub digest: String,
    pub model_id: String,
    pub schema_tag: String,
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug)]
pub struct FileCache {
    dir: PathBuf,
}

impl FileCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let shard = &key.0[..2.min(key.0.len())];
        self.dir.join(shard).join(format!("{}.json", key.0))
    }

    pub fn get(&self, key: &CacheKey) -> Option<CachedEntry> {
        let bytes = std::fs::read(self.entry_path(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put(
        &self,
        key: &CacheKey,
        request: &ChatRequest,
        reply: &BackendReply,
    ) -> std::io::Result<()> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry path has parent");
        std::fs::create_dir_all(parent)?;
        let entry = CachedEntry {
            digest: key.0.clone(),
            model_id: request.model_id.clone(),
            schema_tag: request.schema_tag.clone(),
            text: reply.text.clone(),
            usage: reply.usage,
        };
        let tmp = parent.join(format!(
            ".tmp-{}-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed),
            &key.0[..8.min(key.0.len())]
        ));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
