//! Content-addressed result cache: JSON values keyed by the SHA-256 of a
//! canonical JSON tuple, held in memory and optionally mirrored to disk.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::AgentError;

pub fn cache_key(tuple: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this text is canonical
    let text = serde_json::to_string(tuple).expect("json value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Default)]
pub struct Cache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    writes: Mutex<()>,
    tmp_counter: AtomicU64,
}

impl Cache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, AgentError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| AgentError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key[..2.min(key.len())]).join(format!("{key}.json")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.memory.lock().contains_key(key) || self.path(key).is_some_and(|p| p.exists())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let text = match self.memory.lock().get(key) {
            Some(t) => Some(t.clone()),
            None => self.path(key).and_then(|p| fs::read_to_string(p).ok()),
        }?;
        match serde_json::from_str(&text) {
            Ok(v) => {
                self.memory.lock().insert(key.to_string(), text);
                Some(v)
            }
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<(), AgentError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| AgentError::Cache(e.to_string()))?;
        let _guard = self.writes.lock();
        if let Some(path) = self.path(key) {
            let dir = path.parent().expect("cache path has a parent");
            let err = |e: std::io::Error| AgentError::Cache(format!("{}: {e}", path.display()));
            fs::create_dir_all(dir).map_err(err)?;
            let tmp = dir.join(format!(
                ".{key}.{}.{}.tmp",
                std::process::id(),
                self.tmp_counter.fetch_add(1, Ordering::Relaxed)
            ));
            let mut f = fs::File::create(&tmp).map_err(err)?;
            f.write_all(text.as_bytes()).map_err(err)?;
            f.sync_all().map_err(err)?;
            fs::rename(&tmp, &path).map_err(err)?;
        }
        self.memory.lock().insert(key.to_string(), text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_ignores_object_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(cache_key(&a), cache_key(&b));
        assert_ne!(cache_key(&a), cache_key(&json!({"x": 2, "y": [1, 2]})));
        assert_eq!(cache_key(&a).len(), 64);
    }

    #[test]
    fn disk_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let key = cache_key(&json!(["explanation", 1]));
        {
            let c = Cache::on_disk(dir.path()).unwrap();
            assert!(c.get::<String>(&key).is_none());
            c.put(&key, &"hello".to_string()).unwrap();
        }
        let c = Cache::on_disk(dir.path()).unwrap();
        assert!(c.contains(&key));
        assert_eq!(c.get::<String>(&key).unwrap(), "hello");
        let leftovers: Vec<_> = walk(dir.path()).into_iter().filter(|p| p.ends_with(".tmp")).collect();
        assert!(leftovers.is_empty());
    }

    fn walk(p: &Path) -> Vec<String> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                out.extend(walk(&e));
            } else {
                out.push(e.display().to_string());
            }
        }
        out
    }
}
