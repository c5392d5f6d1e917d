use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;

use embmapper_core::agents::provider::ProviderConfig;
use embmapper_core::agents::{cache_key, Agent, AgentConfig, Cache};
use embmapper_core::dataset::{load_dataset, Dataset};
use embmapper_core::mapper::{build_mapper, MapperGraph, MapperParams};
use embmapper_core::projection::{pca_project, read_projection_file, Projection2D};
use embmapper_core::trajectory::Trajectory;

use crate::error::ServiceError;
use crate::jobs::Jobs;
use crate::store::SessionStore;

/// Which model and embedding providers back the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Providers {
    /// Deterministic in-process mocks; nothing leaves the machine.
    Mock,
    Http(ProviderConfig),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Each subdirectory holding a `manifest.json` is one dataset.
    pub datasets_dir: PathBuf,
    /// Sessions, graphs and trajectories.
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub providers: Providers,
    /// Agent jobs allowed to run at once.
    pub max_jobs: usize,
}

impl ServiceConfig {
    /// Data and cache directories default to `data/` and `cache/` under
    /// `root`.
    pub fn under(datasets_dir: impl Into<PathBuf>, root: &Path, providers: Providers) -> Self {
        Self {
            datasets_dir: datasets_dir.into(),
            data_dir: root.join("data"),
            cache_dir: root.join("cache"),
            providers,
            max_jobs: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredTrajectory {
    pub graph_id: String,
    pub trajectory: Trajectory,
}

type GraphSlot = Arc<OnceLock<Result<Arc<MapperGraph>, String>>>;

pub(crate) struct Inner {
    pub config: ServiceConfig,
    pub datasets: BTreeMap<String, Arc<Dataset>>,
    graphs: Mutex<HashMap<String, GraphSlot>>,
    agents: Mutex<HashMap<String, Arc<Agent>>>,
    pub cache: Arc<Cache>,
    pub jobs: Jobs,
    pub sessions: SessionStore,
    trajectories: RwLock<HashMap<String, StoredTrajectory>>,
    trajectory_lock: Mutex<()>,
    projections: Mutex<HashMap<(String, u32, String), Arc<Projection2D>>>,
}

/// Shared handle given to every request.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

/// Graph id for a `(dataset, layer, params)` triple.
pub fn graph_id(dataset: &str, layer: u32, params: &MapperParams) -> String {
    cache_key(&json!({
        "kind": "graph",
        "dataset": dataset,
        "layer": layer,
        "params_hash": params.params_hash(),
    }))
}

pub(crate) fn id_is_safe(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let dir = path.parent().expect("path has a parent");
    fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        uuid::Uuid::new_v4()
    ));
    fs::write(&tmp, bytes).map_err(|e| ServiceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ServiceError::io(path, e))
}

pub fn load_datasets(dir: &Path) -> Result<BTreeMap<String, Arc<Dataset>>, ServiceError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))?;
    let mut manifests: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("manifest.json"))
        .filter(|p| p.is_file())
        .collect();
    if dir.join("manifest.json").is_file() {
        manifests.push(dir.join("manifest.json"));
    }
    manifests.sort();
    for m in manifests {
        let ds = load_dataset(&m).map_err(|e| ServiceError::Config(e.to_string()))?;
        log::info!("loaded dataset `{}` ({} points) from {}", ds.name, ds.len(), m.display());
        if out.insert(ds.name.clone(), Arc::new(ds)).is_some() {
            return Err(ServiceError::Config(format!("duplicate dataset name in {}", m.display())));
        }
    }
    Ok(out)
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        let datasets = load_datasets(&config.datasets_dir)?;
        let cache = Cache::on_disk(&config.cache_dir).map_err(|e| ServiceError::Config(e.to_string()))?;
        let sessions = SessionStore::open(&config.data_dir.join("sessions"))?;
        let trajectories = load_trajectories(&config.data_dir.join("trajectories"))?;
        Ok(Self(Arc::new(Inner {
            jobs: Jobs::new(config.max_jobs.max(1)),
            config,
            datasets,
            graphs: Mutex::new(HashMap::new()),
            agents: Mutex::new(HashMap::new()),
            cache: Arc::new(cache),
            sessions,
            trajectories: RwLock::new(trajectories),
            trajectory_lock: Mutex::new(()),
            projections: Mutex::new(HashMap::new()),
        })))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<Dataset>, ServiceError> {
        self.0
            .datasets
            .get(name)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown dataset `{name}`")))
    }

    fn graph_path(&self, id: &str) -> PathBuf {
        self.0.config.data_dir.join("graphs").join(format!("{id}.json"))
    }

    /// Builds the graph once per id; concurrent callers wait for the first.
    /// Returns the id and whether it was already available.
    pub fn mapper(&self, dataset: &str, layer: u32, params: &MapperParams) -> Result<(String, bool), ServiceError> {
        params.validate()?;
        let ds = self.dataset(dataset)?;
        ds.layer(layer)?;
        let id = graph_id(dataset, layer, params);
        let slot = self.0.graphs.lock().entry(id.clone()).or_default().clone();
        let mut computed = false;
        let result = slot.get_or_init(|| {
            let path = self.graph_path(&id);
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(g) = MapperGraph::from_json(&text) {
                    return Ok(Arc::new(g));
                }
                log::warn!("ignoring unreadable graph file {}", path.display());
            }
            computed = true;
            let g = build_mapper(&ds, layer, params).map_err(|e| e.to_string())?;
            write_atomic(&path, g.to_json().as_bytes()).map_err(|e| e.to_string())?;
            log::info!("built graph {id}: {} nodes, {} edges", g.nodes.len(), g.edges.len());
            Ok(Arc::new(g))
        });
        match result {
            Ok(_) => Ok((id, !computed)),
            Err(e) => {
                self.0.graphs.lock().remove(&id);
                Err(ServiceError::Unprocessable(e.clone()))
            }
        }
    }

    pub fn graph(&self, id: &str) -> Result<Arc<MapperGraph>, ServiceError> {
        let missing = || ServiceError::NotFound(format!("unknown graph `{id}`"));
        if !id_is_safe(id) {
            return Err(missing());
        }
        if let Some(Some(Ok(g))) = self.0.graphs.lock().get(id).map(|s| s.get()) {
            return Ok(g.clone());
        }
        let text = fs::read_to_string(self.graph_path(id)).map_err(|_| missing())?;
        let g = Arc::new(MapperGraph::from_json(&text).map_err(|e| ServiceError::Internal(e.to_string()))?);
        let slot: GraphSlot = Arc::new(OnceLock::new());
        let _ = slot.set(Ok(g.clone()));
        self.0.graphs.lock().entry(id.to_string()).or_insert(slot);
        Ok(g)
    }

    /// Graph together with the dataset it was built from.
    pub fn graph_with_dataset(&self, id: &str) -> Result<(Arc<MapperGraph>, Arc<Dataset>), ServiceError> {
        let g = self.graph(id)?;
        let ds = self.dataset(&g.dataset)?;
        Ok((g, ds))
    }

    /// One agent per dataset, sharing the response cache.
    pub fn agent(&self, dataset: &str) -> Result<Arc<Agent>, ServiceError> {
        if let Some(a) = self.0.agents.lock().get(dataset) {
            return Ok(a.clone());
        }
        let ds = self.dataset(dataset)?;
        let agent = match &self.0.config.providers {
            Providers::Mock => Agent::offline(&ds, self.0.cache.clone()),
            Providers::Http(cfg) => {
                let err = |e: embmapper_core::agents::ProviderError| ServiceError::Provider(e.to_string());
                Agent::new(
                    Arc::new(cfg.chat().map_err(err)?),
                    Arc::new(cfg.sentence_embedder().map_err(err)?),
                    Arc::new(cfg.occurrence_embedder().map_err(err)?),
                    self.0.cache.clone(),
                    AgentConfig::default(),
                )
            }
        };
        let agent = Arc::new(agent);
        self.0.agents.lock().insert(dataset.to_string(), agent.clone());
        Ok(agent)
    }

    pub fn cache(&self) -> &Cache {
        &self.0.cache
    }

    pub fn jobs(&self) -> &Jobs {
        &self.0.jobs
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.0.sessions
    }

    pub fn trajectory(&self, id: &str) -> Result<StoredTrajectory, ServiceError> {
        self.0
            .trajectories
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown trajectory `{id}`")))
    }

    pub fn put_trajectory(&self, stored: StoredTrajectory) -> Result<(), ServiceError> {
        let _guard = self.0.trajectory_lock.lock();
        self.put_trajectory_locked(stored)
    }

    /// Serializes read-modify-write cycles on stored trajectories.
    pub(crate) fn trajectory_edit_lock(&self) -> parking_lot::MutexGuard<'_, ()> {
        self.0.trajectory_lock.lock()
    }

    pub(crate) fn put_trajectory_locked(&self, stored: StoredTrajectory) -> Result<(), ServiceError> {
        let path = self
            .0
            .config
            .data_dir
            .join("trajectories")
            .join(format!("{}.json", stored.trajectory.id));
        let bytes = serde_json::to_vec_pretty(&stored).map_err(|e| ServiceError::Internal(e.to_string()))?;
        write_atomic(&path, &bytes)?;
        self.0.trajectories.write().insert(stored.trajectory.id.clone(), stored);
        Ok(())
    }

    /// `pca` is computed on demand; other methods must be listed in the
    /// dataset manifest for this layer.
    pub fn projection(&self, dataset: &str, layer: u32, method: &str) -> Result<Arc<Projection2D>, ServiceError> {
        let key = (dataset.to_string(), layer, method.to_string());
        if let Some(p) = self.0.projections.lock().get(&key) {
            return Ok(p.clone());
        }
        let ds = self.dataset(dataset)?;
        let emb = ds.layer(layer)?;
        let file = ds.projections().iter().find(|p| p.layer == layer && p.method == method);
        let proj = match (file, method) {
            (Some(f), _) => read_projection_file(&f.path)?,
            (None, "pca") => pca_project(emb)?,
            (None, other) => {
                return Err(ServiceError::Unprocessable(format!(
                    "no `{other}` projection for layer {layer} of `{dataset}`"
                )))
            }
        };
        let proj = Arc::new(proj);
        self.0.projections.lock().insert(key, proj.clone());
        Ok(proj)
    }

    pub fn precompute_path(&self, graph_id: &str) -> PathBuf {
        self.0.config.data_dir.join("precompute").join(format!("{graph_id}.json"))
    }
}

fn load_trajectories(dir: &Path) -> Result<HashMap<String, StoredTrajectory>, ServiceError> {
    let mut out = HashMap::new();
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(out);
    };
    for entry in entries.filter_map(|e| e.ok()) {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
        match serde_json::from_str::<StoredTrajectory>(&text) {
            Ok(t) => {
                out.insert(t.trajectory.id.clone(), t);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}
