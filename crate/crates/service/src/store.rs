use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use embmapper_core::mapper::MapperParams;

use crate::error::ServiceError;
use crate::state::{id_is_safe, write_atomic};

/// The graph element an annotation is attached to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementRef {
    pub dataset: String,
    pub layer: u32,
    pub params_hash: String,
    /// Element key such as `node:3` or `edge:1-2`.
    pub element: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub session_id: String,
    pub element: ElementRef,
    pub text: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
    /// Bumped on every update.
    pub version: u64,
    pub created: DateTime<Utc>,
    pub modified: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dataset: String,
    pub layer: u32,
    pub params: MapperParams,
    pub params_hash: String,
    pub graph_id: String,
    pub created: DateTime<Utc>,
    pub modified: DateTime<Utc>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    /// Ids of explanations requested in this session.
    #[serde(default)]
    pub explanations: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnnotationPatch {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub keywords: Option<Vec<String>>,
    #[serde(default)]
    pub derived_from: Option<String>,
    /// Version the client last saw; a stale value still wins but is logged.
    #[serde(default)]
    pub version: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct AnnotationFilter {
    pub element: Option<String>,
    pub session: Option<String>,
    pub dataset: Option<String>,
    pub params_hash: Option<String>,
}

impl AnnotationFilter {
    fn matches(&self, a: &Annotation) -> bool {
        self.element.as_ref().is_none_or(|e| *e == a.element.element)
            && self.session.as_ref().is_none_or(|s| *s == a.session_id)
            && self.dataset.as_ref().is_none_or(|d| *d == a.element.dataset)
            && self.params_hash.as_ref().is_none_or(|h| *h == a.element.params_hash)
    }
}

/// A timestamp strictly after `prev`.
fn after(prev: DateTime<Utc>) -> DateTime<Utc> {
    Utc::now().max(prev + TimeDelta::microseconds(1))
}

/// One JSON document per session, rewritten atomically on every change.
pub struct SessionStore {
    dir: PathBuf,
    sessions: Mutex<BTreeMap<String, Session>>,
}

impl SessionStore {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        let mut sessions = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))?.filter_map(|e| e.ok()) {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
            let s: Session = serde_json::from_str(&text)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
            sessions.insert(s.id.clone(), s);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            sessions: Mutex::new(sessions),
        })
    }

    fn persist(&self, s: &Session) -> Result<(), ServiceError> {
        let bytes = serde_json::to_vec_pretty(s).map_err(|e| ServiceError::Internal(e.to_string()))?;
        write_atomic(&self.dir.join(format!("{}.json", s.id)), &bytes)
    }

    /// Applies `f` to a copy of the session and stores it only if the
    /// write succeeds.
    fn modify<T>(
        &self,
        map: &mut BTreeMap<String, Session>,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let mut s = map
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session `{id}`")))?;
        let out = f(&mut s)?;
        s.modified = after(s.modified);
        self.persist(&s)?;
        map.insert(id.to_string(), s);
        Ok(out)
    }

    /// Creates a session, or returns the existing one when `id` is taken.
    pub fn create(
        &self,
        id: Option<String>,
        dataset: &str,
        layer: u32,
        params: MapperParams,
        graph_id: &str,
    ) -> Result<Session, ServiceError> {
        let mut map = self.sessions.lock();
        let id = id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        if !id_is_safe(&id) {
            return Err(ServiceError::BadRequest(format!("invalid session id `{id}`")));
        }
        if let Some(s) = map.get(&id) {
            return Ok(s.clone());
        }
        let now = Utc::now();
        let s = Session {
            id: id.clone(),
            dataset: dataset.to_string(),
            layer,
            params_hash: params.params_hash(),
            params,
            graph_id: graph_id.to_string(),
            created: now,
            modified: now,
            annotations: Vec::new(),
            explanations: Vec::new(),
        };
        self.persist(&s)?;
        map.insert(id, s.clone());
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Result<Session, ServiceError> {
        self.sessions
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session `{id}`")))
    }

    pub fn list(&self) -> Vec<Session> {
        self.sessions.lock().values().cloned().collect()
    }

    pub fn add_explanation(&self, session_id: &str, explanation_id: &str) -> Result<(), ServiceError> {
        let mut map = self.sessions.lock();
        if map.get(session_id).is_some_and(|s| s.explanations.iter().any(|e| e == explanation_id)) {
            return Ok(());
        }
        self.modify(&mut map, session_id, |s| {
            s.explanations.push(explanation_id.to_string());
            Ok(())
        })
    }

    pub fn create_annotation(
        &self,
        session_id: &str,
        element: ElementRef,
        text: String,
        keywords: Vec<String>,
        derived_from: Option<String>,
    ) -> Result<Annotation, ServiceError> {
        let mut map = self.sessions.lock();
        self.modify(&mut map, session_id, |s| {
            let now = Utc::now();
            let a = Annotation {
                id: uuid::Uuid::new_v4().to_string(),
                session_id: s.id.clone(),
                element,
                text,
                keywords,
                derived_from,
                version: 1,
                created: now,
                modified: now,
            };
            s.annotations.push(a.clone());
            Ok(a)
        })
    }

    fn owner(map: &BTreeMap<String, Session>, annotation_id: &str) -> Result<String, ServiceError> {
        map.values()
            .find(|s| s.annotations.iter().any(|a| a.id == annotation_id))
            .map(|s| s.id.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("unknown annotation `{annotation_id}`")))
    }

    pub fn annotation(&self, id: &str) -> Result<Annotation, ServiceError> {
        self.sessions
            .lock()
            .values()
            .flat_map(|s| s.annotations.iter())
            .find(|a| a.id == id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown annotation `{id}`")))
    }

    pub fn annotations(&self, filter: &AnnotationFilter) -> Vec<Annotation> {
        self.sessions
            .lock()
            .values()
            .flat_map(|s| s.annotations.iter())
            .filter(|a| filter.matches(a))
            .cloned()
            .collect()
    }

    /// Last write wins; every update bumps the version.
    pub fn update_annotation(&self, id: &str, patch: AnnotationPatch) -> Result<Annotation, ServiceError> {
        let mut map = self.sessions.lock();
        let owner = Self::owner(&map, id)?;
        self.modify(&mut map, &owner, |s| {
            let a = s.annotations.iter_mut().find(|a| a.id == id).expect("owner holds it");
            if let Some(seen) = patch.version.filter(|v| *v != a.version) {
                log::info!("annotation {id}: client saw version {seen}, current {}; overwriting", a.version);
            }
            if let Some(text) = patch.text {
                a.text = text;
            }
            if let Some(k) = patch.keywords {
                a.keywords = k;
            }
            if patch.derived_from.is_some() {
                a.derived_from = patch.derived_from;
            }
            a.version += 1;
            a.modified = after(a.modified);
            Ok(a.clone())
        })
    }

    pub fn delete_annotation(&self, id: &str) -> Result<(), ServiceError> {
        let mut map = self.sessions.lock();
        let owner = Self::owner(&map, id)?;
        self.modify(&mut map, &owner, |s| {
            s.annotations.retain(|a| a.id != id);
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn element() -> ElementRef {
        ElementRef {
            dataset: "toy".into(),
            layer: 1,
            params_hash: "h".into(),
            element: "node:0".into(),
        }
    }

    #[test]
    fn annotations_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        store.create(Some("s".into()), "toy", 1, MapperParams::default(), "g").unwrap();
        let a = store.create_annotation("s", element(), "note".into(), vec![], None).unwrap();
        drop(store);
        let again = SessionStore::open(dir.path()).unwrap();
        assert_eq!(again.annotation(&a.id).unwrap(), a);
    }

    #[test]
    fn update_bumps_version_and_time() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        store.create(Some("s".into()), "toy", 1, MapperParams::default(), "g").unwrap();
        let a = store.create_annotation("s", element(), "note".into(), vec![], None).unwrap();
        let patch = || AnnotationPatch {
            text: Some("edited".into()),
            version: Some(1),
            ..Default::default()
        };
        let b = store.update_annotation(&a.id, patch()).unwrap();
        assert_eq!((b.version, b.text.as_str()), (2, "edited"));
        assert!(b.modified > a.modified);
        // stale version still wins
        let c = store.update_annotation(&a.id, patch()).unwrap();
        assert_eq!(c.version, 3);
        assert!(c.modified > b.modified);
    }

    #[test]
    fn delete_then_lookup_fails() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        store.create(Some("s".into()), "toy", 1, MapperParams::default(), "g").unwrap();
        let a = store.create_annotation("s", element(), "note".into(), vec![], None).unwrap();
        store.delete_annotation(&a.id).unwrap();
        assert!(matches!(store.annotation(&a.id), Err(ServiceError::NotFound(_))));
        assert!(store.delete_annotation(&a.id).is_err());
        let reopened = SessionStore::open(dir.path()).unwrap();
        assert!(reopened.annotations(&AnnotationFilter::default()).is_empty());
    }

    #[test]
    fn filter_by_element() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        store.create(Some("s".into()), "toy", 1, MapperParams::default(), "g").unwrap();
        store.create_annotation("s", element(), "a".into(), vec![], None).unwrap();
        let other = ElementRef { element: "edge:0-1".into(), ..element() };
        store.create_annotation("s", other, "b".into(), vec![], None).unwrap();
        let f = AnnotationFilter { element: Some("edge:0-1".into()), ..Default::default() };
        let got = store.annotations(&f);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].text, "b");
    }
}
