use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use embmapper_core::agents::{Agent, AgentError, ElementSelection, Explanation, Operation};
use embmapper_core::dataset::{MatchMode, PointId};
use embmapper_core::mapper::{Element, MapperGraph, MapperParams, NodeId};
use embmapper_core::projection::{anchored_layout, Projection2D};
use embmapper_core::trajectory::{build_trajectory, edit_trajectory, TrajectoryEdit};

use crate::error::ServiceError;
use crate::jobs::{Job, JobFailure};
use crate::state::{AppState, StoredTrajectory};
use crate::store::{AnnotationFilter, AnnotationPatch, ElementRef};

type ApiResult<T> = Result<T, ServiceError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/datasets", get(datasets))
        .route("/datasets/{name}/layers", get(layers))
        .route("/datasets/{name}/filter", get(filter_tokens))
        .route("/datasets/{name}/points/{id}", get(point))
        .route("/mapper", post(mapper))
        .route("/mapper/{id}", get(graph))
        .route("/mapper/{id}/components", get(components))
        .route("/mapper/{id}/path", get(path))
        .route("/mapper/{id}/element", get(element))
        .route("/mapper/{id}/graphml", get(graphml))
        .route("/projection", get(projection))
        .route("/explain", post(explain))
        .route("/explanations/{id}", get(explanation))
        .route("/verify", post(verify))
        .route("/jobs/{id}", get(job))
        .route("/trajectory", post(trajectory))
        .route("/trajectory/{id}", get(get_trajectory).patch(patch_trajectory))
        .route("/precompute", post(precompute))
        .route("/precompute/{graph_id}", get(precomputed))
        .route("/sessions", get(sessions).post(create_session))
        .route("/sessions/{id}", get(session))
        .route("/annotations", get(annotations).post(create_annotation))
        .route(
            "/annotations/{id}",
            get(annotation).patch(update_annotation).put(update_annotation).delete(delete_annotation),
        )
        .with_state(state)
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker panicked: {e}")))?
}

fn accepted(job: Job) -> impl IntoResponse {
    (StatusCode::ACCEPTED, Json(job))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

fn failure(e: &AgentError) -> JobFailure {
    let partial = match e {
        AgentError::VerificationFailed { partial, .. } => Some(to_value(partial)),
        _ => None,
    };
    JobFailure {
        message: e.to_string(),
        provider: e.is_provider(),
        partial,
    }
}

fn plain_failure(e: ServiceError) -> JobFailure {
    JobFailure {
        provider: matches!(e, ServiceError::Provider(_)),
        message: e.to_string(),
        partial: None,
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct DatasetInfo {
    name: String,
    points: usize,
    layers: Vec<u32>,
    label_kinds: Vec<String>,
    projections: Vec<String>,
}

async fn datasets(State(s): State<AppState>) -> Json<Vec<DatasetInfo>> {
    Json(
        s.0.datasets
            .values()
            .map(|d| DatasetInfo {
                name: d.name.clone(),
                points: d.len(),
                layers: d.layer_ids(),
                label_kinds: d.label_kinds().iter().cloned().collect(),
                projections: d.projections().iter().map(|p| p.method.clone()).collect(),
            })
            .collect(),
    )
}

async fn layers(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    let ds = s.dataset(&name)?;
    let out: Vec<Value> = ds
        .layer_ids()
        .into_iter()
        .map(|l| {
            let layer = ds.layer(l).expect("listed layer exists");
            let (lo, hi) = layer.lens_range().unwrap_or((0.0, 0.0));
            json!({ "layer": l, "dim": layer.dim, "points": layer.len(), "lens_min": lo, "lens_max": hi })
        })
        .collect();
    Ok(Json(Value::Array(out)))
}

#[derive(Deserialize)]
struct FilterQuery {
    #[serde(default)]
    query: String,
    #[serde(default)]
    mode: MatchMode,
}

async fn filter_tokens(
    State(s): State<AppState>,
    Path(name): Path<String>,
    Query(q): Query<FilterQuery>,
) -> ApiResult<Json<Value>> {
    let ds = s.dataset(&name)?;
    Ok(Json(json!({ "points": ds.filter_tokens(&q.query, q.mode) })))
}

async fn point(State(s): State<AppState>, Path((name, id)): Path<(String, PointId)>) -> ApiResult<Json<Value>> {
    let ds = s.dataset(&name)?;
    let occ = ds
        .occurrence(id)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown point {id}")))?;
    Ok(Json(json!({
        "occurrence": occ,
        "sentence": ds.sentence_text(occ.sentence_id),
    })))
}

#[derive(Deserialize)]
struct MapperRequest {
    dataset: String,
    layer: u32,
    #[serde(default)]
    params: MapperParams,
}

fn summary(id: &str, g: &MapperGraph, cached: bool) -> Value {
    json!({
        "graph_id": id,
        "cached": cached,
        "nodes": g.nodes.len(),
        "edges": g.edges.len(),
        "components": g.components().len(),
        "epsilon": g.epsilon,
        "params_hash": g.params.params_hash(),
    })
}

async fn mapper(State(s): State<AppState>, Json(req): Json<MapperRequest>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (id, cached) = s.mapper(&req.dataset, req.layer, &req.params)?;
        let g = s.graph(&id)?;
        Ok(Json(summary(&id, &g, cached)))
    })
    .await
}

async fn graph(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(to_value(&*s.graph(&id)?)))
}

async fn graphml(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let g = s.graph(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/graphml+xml")], g.to_graphml()))
}

async fn components(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let g = s.graph(&id)?;
    Ok(Json(json!({ "components": g.components(), "cycle_rank": g.cycle_rank() })))
}

#[derive(Deserialize)]
struct PathQuery {
    src: NodeId,
    dst: NodeId,
}

async fn path(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PathQuery>,
) -> ApiResult<Json<Value>> {
    let g = s.graph(&id)?;
    let path = g.shortest_path(q.src, q.dst)?;
    Ok(Json(json!({ "src": q.src, "dst": q.dst, "path": path })))
}

/// Element given either as a key (`edge:1-2`) or as a tagged object.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ElementInput {
    Key(String),
    Typed(Element),
}

impl ElementInput {
    fn element(self) -> ApiResult<Element> {
        match self {
            ElementInput::Typed(e) => Ok(e),
            ElementInput::Key(k) => {
                Element::parse_key(&k).ok_or_else(|| ServiceError::BadRequest(format!("bad element key `{k}`")))
            }
        }
    }
}

#[derive(Deserialize)]
struct ElementQuery {
    key: Option<String>,
    kind: Option<String>,
    id: Option<String>,
    a: Option<NodeId>,
    b: Option<NodeId>,
    nodes: Option<String>,
    index: Option<usize>,
}

impl ElementQuery {
    fn element(self) -> ApiResult<Element> {
        if let Some(k) = self.key {
            return ElementInput::Key(k).element();
        }
        let missing = |f: &str| ServiceError::BadRequest(format!("missing query parameter `{f}`"));
        let kind = self.kind.ok_or_else(|| missing("kind"))?;
        Ok(match kind.as_str() {
            "node" => Element::Node {
                id: self
                    .id
                    .ok_or_else(|| missing("id"))?
                    .parse()
                    .map_err(|_| ServiceError::BadRequest("node id must be an integer".into()))?,
            },
            "edge" => Element::Edge {
                a: self.a.ok_or_else(|| missing("a"))?,
                b: self.b.ok_or_else(|| missing("b"))?,
            },
            "path" => Element::Path {
                nodes: self
                    .nodes
                    .ok_or_else(|| missing("nodes"))?
                    .split(',')
                    .map(|n| n.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ServiceError::BadRequest("nodes must be comma-separated integers".into()))?,
            },
            "component" => Element::Component {
                index: self.index.ok_or_else(|| missing("index"))?,
            },
            "trajectory" => Element::Trajectory {
                id: self.id.ok_or_else(|| missing("id"))?,
            },
            other => return Err(ServiceError::BadRequest(format!("unknown element kind `{other}`"))),
        })
    }
}

async fn element(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ElementQuery>,
) -> ApiResult<Json<Value>> {
    let (g, ds) = s.graph_with_dataset(&id)?;
    let element = q.element()?;
    if let Element::Trajectory { id } = &element {
        let t = s.trajectory(id)?;
        return Ok(Json(json!({ "key": element.key(), "element": element, "trajectory": t.trajectory })));
    }
    let resolved = g.element_points(&element)?;
    let points = resolved.all_points();
    let mut labels = BTreeMap::new();
    for kind in ds.label_kinds() {
        labels.insert(kind.clone(), ds.label_histogram(points.iter(), kind)?);
    }
    let mut tokens: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &points {
        if let Some(o) = ds.occurrence(*p) {
            *tokens.entry(o.token.as_str()).or_insert(0) += 1;
        }
    }
    Ok(Json(json!({
        "key": element.key(),
        "element": element,
        "resolved": resolved,
        "points": points,
        "labels": labels,
        "tokens": tokens,
    })))
}

#[derive(Deserialize)]
struct ProjectionQuery {
    dataset: String,
    layer: u32,
    #[serde(default = "default_method")]
    method: String,
    graph_id: Option<String>,
}

fn default_method() -> String {
    "pca".into()
}

#[derive(Serialize)]
struct ProjectionResponse {
    method: String,
    points: Vec<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<BTreeMap<NodeId, (f64, f64)>>,
}

async fn projection(State(s): State<AppState>, Query(q): Query<ProjectionQuery>) -> ApiResult<Json<ProjectionResponse>> {
    blocking(move || {
        let proj: Arc<Projection2D> = s.projection(&q.dataset, q.layer, &q.method)?;
        let layout = match &q.graph_id {
            Some(id) => Some(anchored_layout(&*s.graph(id)?, &proj)?),
            None => None,
        };
        Ok(Json(ProjectionResponse {
            method: proj.method.clone(),
            points: proj
                .coords
                .iter()
                .map(|(id, (x, y))| json!({ "point_id": id, "x": x, "y": y }))
                .collect(),
            layout,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct ExplainRequest {
    graph_id: String,
    selection: ElementInput,
    #[serde(default = "default_operation")]
    operation: Operation,
    second: Option<ElementInput>,
    session_id: Option<String>,
}

fn default_operation() -> Operation {
    Operation::Summarize
}

async fn explain(State(s): State<AppState>, Json(req): Json<ExplainRequest>) -> ApiResult<impl IntoResponse> {
    let (g, ds) = s.graph_with_dataset(&req.graph_id)?;
    let first = ElementSelection::resolve(&g, req.selection.element()?)?;
    let second = req
        .second
        .map(|e| e.element().and_then(|e| Ok(ElementSelection::resolve(&g, e)?)))
        .transpose()?;
    let op = req.operation;
    Agent::check_selection(&first, op, second.as_ref())?;
    if let Some(sid) = &req.session_id {
        s.sessions().get(sid)?;
    }
    let agent = s.agent(&ds.name)?;
    let state = s.clone();
    let job = s.jobs().spawn("explain", move || {
        let e = agent
            .explain(&ds, &g, &first, op, second.as_ref())
            .map_err(|e| failure(&e))?;
        if let Some(sid) = &req.session_id {
            state.sessions().add_explanation(sid, &e.id).map_err(plain_failure)?;
        }
        Ok(to_value(&e))
    });
    Ok(accepted(job))
}

async fn explanation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Explanation>> {
    s.cache()
        .get::<Explanation>(&id)
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown explanation `{id}`")))
}

#[derive(Deserialize)]
struct VerifyRequest {
    explanation_id: String,
}

async fn verify(State(s): State<AppState>, Json(req): Json<VerifyRequest>) -> ApiResult<impl IntoResponse> {
    let e: Explanation = s
        .cache()
        .get(&req.explanation_id)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown explanation `{}`", req.explanation_id)))?;
    let ds = s.dataset(&e.context.dataset)?;
    let agent = s.agent(&ds.name)?;
    let job = s.jobs().spawn("verify", move || {
        agent.verify(&ds, &e).map(|v| to_value(&v)).map_err(|e| failure(&e))
    });
    Ok(accepted(job))
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    s.jobs()
        .get(&id)
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown job `{id}`")))
}

#[derive(Deserialize)]
struct TrajectoryRequest {
    graph_id: String,
    source_pt: PointId,
    target_pt: PointId,
    #[serde(default = "default_steps")]
    k: usize,
}

fn default_steps() -> usize {
    13
}

async fn trajectory(State(s): State<AppState>, Json(req): Json<TrajectoryRequest>) -> ApiResult<impl IntoResponse> {
    let (g, ds) = s.graph_with_dataset(&req.graph_id)?;
    for p in [req.source_pt, req.target_pt] {
        ds.occurrence(p)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown point {p}")))?;
    }
    let agent = s.agent(&ds.name)?;
    let state = s.clone();
    let job = s.jobs().spawn("trajectory", move || {
        let t = build_trajectory(&agent, &ds, &g, req.source_pt, req.target_pt, req.k).map_err(|e| match e {
            embmapper_core::trajectory::TrajectoryError::Agent(a) => failure(&a),
            other => plain_failure(other.into()),
        })?;
        let v = to_value(&t);
        state
            .put_trajectory(StoredTrajectory {
                graph_id: req.graph_id,
                trajectory: t,
            })
            .map_err(plain_failure)?;
        Ok(v)
    });
    Ok(accepted(job))
}

async fn get_trajectory(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let t = s.trajectory(&id)?;
    Ok(Json(json!({ "graph_id": t.graph_id, "trajectory": t.trajectory })))
}

async fn patch_trajectory(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(edit): Json<TrajectoryEdit>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let _guard = s.trajectory_edit_lock();
        let stored = s.trajectory(&id)?;
        let (g, ds) = s.graph_with_dataset(&stored.graph_id)?;
        let agent = s.agent(&ds.name)?;
        let mut t = edit_trajectory(&agent, &ds, &g, &stored.trajectory, &edit)?;
        t.id = id;
        let out = json!({ "graph_id": stored.graph_id, "trajectory": t });
        s.put_trajectory_locked(StoredTrajectory {
            graph_id: stored.graph_id,
            trajectory: t,
        })?;
        Ok(Json(out))
    })
    .await
}

#[derive(Deserialize)]
struct PrecomputeRequest {
    graph_id: String,
}

async fn precompute(State(s): State<AppState>, Json(req): Json<PrecomputeRequest>) -> ApiResult<impl IntoResponse> {
    let (g, ds) = s.graph_with_dataset(&req.graph_id)?;
    let agent = s.agent(&ds.name)?;
    let path = s.precompute_path(&req.graph_id);
    let job = s.jobs().spawn("precompute", move || {
        let report = agent.precompute_annotations(&ds, &g);
        let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        crate::state::write_atomic(&path, &bytes).map_err(plain_failure)?;
        if report.entries.is_empty() && !report.failures.is_empty() {
            return Err(JobFailure {
                message: format!("all {} elements failed", report.failures.len()),
                provider: true,
                partial: Some(to_value(&report)),
            });
        }
        Ok(to_value(&report))
    });
    Ok(accepted(job))
}

async fn precomputed(State(s): State<AppState>, Path(graph_id): Path<String>) -> ApiResult<Json<Value>> {
    s.graph(&graph_id)?;
    let path = s.precompute_path(&graph_id);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| ServiceError::NotFound(format!("no precomputed annotations for `{graph_id}`")))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(Json(v))
}

#[derive(Deserialize)]
struct SessionRequest {
    id: Option<String>,
    dataset: String,
    layer: u32,
    #[serde(default)]
    params: MapperParams,
}

async fn create_session(State(s): State<AppState>, Json(req): Json<SessionRequest>) -> ApiResult<impl IntoResponse> {
    blocking(move || {
        let (graph_id, _) = s.mapper(&req.dataset, req.layer, &req.params)?;
        let session = s.sessions().create(req.id, &req.dataset, req.layer, req.params, &graph_id)?;
        Ok((StatusCode::CREATED, Json(session)))
    })
    .await
}

async fn sessions(State(s): State<AppState>) -> Json<Value> {
    let list: Vec<Value> = s
        .sessions()
        .list()
        .iter()
        .map(|x| {
            json!({
                "id": x.id, "dataset": x.dataset, "layer": x.layer, "graph_id": x.graph_id,
                "params_hash": x.params_hash, "annotations": x.annotations.len(), "modified": x.modified,
            })
        })
        .collect();
    Json(Value::Array(list))
}

async fn session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.sessions().get(&id)?))
}

#[derive(Deserialize)]
struct AnnotationRequest {
    /// Defaults to the graph's own session.
    session_id: Option<String>,
    graph_id: String,
    element: ElementInput,
    text: String,
    #[serde(default)]
    keywords: Vec<String>,
    derived_from: Option<String>,
}

async fn create_annotation(
    State(s): State<AppState>,
    Json(req): Json<AnnotationRequest>,
) -> ApiResult<impl IntoResponse> {
    let g = s.graph(&req.graph_id)?;
    let element = req.element.element()?;
    match &element {
        Element::Trajectory { id } => {
            s.trajectory(id)?;
        }
        other => {
            g.element_points(other)?;
        }
    }
    let session_id = req.session_id.unwrap_or_else(|| req.graph_id.clone());
    let sessions = s.sessions();
    if sessions.get(&session_id).is_err() {
        if session_id != req.graph_id {
            return Err(ServiceError::NotFound(format!("unknown session `{session_id}`")));
        }
        sessions.create(Some(session_id.clone()), &g.dataset, g.layer, g.params.clone(), &req.graph_id)?;
    }
    let element = ElementRef {
        dataset: g.dataset.clone(),
        layer: g.layer,
        params_hash: g.params.params_hash(),
        element: element.key(),
    };
    let a = sessions.create_annotation(&session_id, element, req.text, req.keywords, req.derived_from)?;
    Ok((StatusCode::CREATED, Json(a)))
}

async fn annotations(State(s): State<AppState>, Query(f): Query<AnnotationFilter>) -> impl IntoResponse {
    Json(s.sessions().annotations(&f))
}

async fn annotation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.sessions().annotation(&id)?))
}

async fn update_annotation(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(patch): Json<AnnotationPatch>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.sessions().update_annotation(&id, patch)?))
}

async fn delete_annotation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    s.sessions().delete_annotation(&id)?;
    Ok(StatusCode::NO_CONTENT)
}
