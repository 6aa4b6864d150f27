use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::{cache_key, JudgeBackend, JudgeRequest, Provenance};
use crate::error::{Error, Result};

const HEADER_MAGIC: &str = "# knowtag judge cache v1";
const BODY_SEPARATOR: &str = "\n---\n";

/// One file per digest under `root/<first two hex chars>/`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("00");
        self.root.join(shard).join(format!("{key}.txt"))
    }

    /// Absent keys (and unreadable entries) are misses.
    pub fn lookup(&self, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path_for(key)).ok()?;
        let (header, body) = text.split_once(BODY_SEPARATOR)?;
        if !header.starts_with(HEADER_MAGIC) {
            return None;
        }
        let digest_line = format!("digest: {key}");
        header.lines().any(|l| l == digest_line).then(|| body.to_string())
    }

    /// Writes to a temporary file in the shard directory, then renames.
    pub fn store(&self, key: &str, model: &str, raw_text: &str) -> Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a shard directory");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        write!(
            tmp,
            "{HEADER_MAGIC}\nmodel: {model}\ndigest: {key}\ntimestamp: {timestamp}{BODY_SEPARATOR}{raw_text}"
        )
        .map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

pub struct CachedJudge<B> {
    inner: B,
    cache: ResponseCache,
}

impl<B> CachedJudge<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        CachedJudge { inner, cache }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl<B: JudgeBackend> JudgeBackend for CachedJudge<B> {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)> {
        let key = cache_key(request);
        if let Some(text) = self.cache.lookup(&key) {
            return Ok((text, Provenance::Cache));
        }
        let (text, provenance) = self.inner.complete(request)?;
        self.cache.store(&key, &request.model_name, &text)?;
        Ok((text, provenance))
    }
}
