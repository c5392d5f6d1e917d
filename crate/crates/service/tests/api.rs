use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use embmapper_core::agents::provider::ProviderConfig;
use embmapper_core::synth::{generate, Shape, SynthConfig};
use embmapper_service::{AppState, BackgroundServer, Providers, ServiceConfig};

struct Client(ureq::Agent);

impl Client {
    fn new() -> Self {
        Self(
            ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(30)))
                .build()
                .into(),
        )
    }

    fn read(mut r: ureq::http::Response<ureq::Body>) -> (u16, Value) {
        let status = r.status().as_u16();
        let text = r.body_mut().read_to_string().unwrap();
        let v = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
        (status, v)
    }

    fn get(&self, url: &str) -> (u16, Value) {
        Self::read(self.0.get(url).call().unwrap())
    }

    fn post(&self, url: &str, body: &Value) -> (u16, Value) {
        Self::read(self.0.post(url).send_json(body).unwrap())
    }

    fn patch(&self, url: &str, body: &Value) -> (u16, Value) {
        Self::read(self.0.patch(url).send_json(body).unwrap())
    }

    fn delete(&self, url: &str) -> (u16, Value) {
        Self::read(self.0.delete(url).call().unwrap())
    }
}

fn write_datasets(dir: &Path) {
    let blobs = SynthConfig { shape: Shape::Blobs, n: 60, k: 2, seed: 5, name: Some("blobs".into()), ..Default::default() };
    generate(&blobs).unwrap().write_to_dir(&dir.join("blobs")).unwrap();
    let circle = SynthConfig { shape: Shape::OffsetCircle, n: 120, seed: 1, name: Some("circle".into()), ..Default::default() };
    generate(&circle).unwrap().write_to_dir(&dir.join("circle")).unwrap();
}

fn start(datasets: &Path, root: &Path, providers: Providers) -> BackgroundServer {
    let state = AppState::new(ServiceConfig::under(datasets, root, providers)).unwrap();
    BackgroundServer::start(state, "127.0.0.1:0").unwrap()
}

fn wait_job(c: &Client, s: &BackgroundServer, job: &Value) -> Value {
    let id = job["id"].as_str().unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let (code, j) = c.get(&s.url(&format!("/jobs/{id}")));
        assert_eq!(code, 200);
        if j["status"] == "done" || j["status"] == "failed" {
            return j;
        }
        assert!(Instant::now() < deadline, "job {id} timed out");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn blob_graph(c: &Client, s: &BackgroundServer) -> Value {
    let body = json!({
        "dataset": "blobs",
        "layer": 1,
        "params": {"kind": "ball", "epsilon": 3.0},
    });
    let (code, v) = c.post(&s.url("/mapper"), &body);
    assert_eq!(code, 200, "{v}");
    v
}

#[test]
fn health_and_catalog() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Mock);
    let c = Client::new();
    assert_eq!(c.get(&s.url("/health")), (200, json!({"status": "ok"})));
    let (_, list) = c.get(&s.url("/datasets"));
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["blobs", "circle"]);
    let (code, layers) = c.get(&s.url("/datasets/circle/layers"));
    assert_eq!(code, 200);
    assert_eq!(layers[0]["layer"], 1);
    assert!((layers[0]["lens_min"].as_f64().unwrap() - 2.0).abs() < 0.1);
    assert_eq!(c.get(&s.url("/datasets/nope/layers")).0, 404);
    let (_, f) = c.get(&s.url("/datasets/blobs/filter?query=&mode=prefix"));
    assert_eq!(f["points"].as_array().unwrap().len() as u64, list[0]["points"].as_u64().unwrap());
    let (code, p) = c.get(&s.url("/datasets/blobs/points/0"));
    assert_eq!(code, 200);
    assert!(p["sentence"].as_str().unwrap().contains(p["occurrence"]["token"].as_str().unwrap()));
}

#[test]
fn mapper_is_memoized_and_queryable() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Mock);
    let c = Client::new();
    let body = json!({
        "dataset": "circle",
        "layer": 1,
        "params": {"kind": "classical", "cover_n": 8, "cover_overlap": 0.3, "min_pts": 3, "epsilon": "auto"},
    });
    let (code, first) = c.post(&s.url("/mapper"), &body);
    assert_eq!(code, 200, "{first}");
    assert_eq!(first["cached"], false);
    // same parameters in a different field order
    let reordered = json!({
        "params": {"epsilon": "auto", "min_pts": 3, "cover_overlap": 0.3, "cover_n": 8, "kind": "classical"},
        "layer": 1,
        "dataset": "circle",
    });
    let (_, second) = c.post(&s.url("/mapper"), &reordered);
    assert_eq!(second["graph_id"], first["graph_id"]);
    assert_eq!(second["cached"], true);

    let id = first["graph_id"].as_str().unwrap();
    let (_, g) = c.get(&s.url(&format!("/mapper/{id}")));
    let n = g["nodes"].as_array().unwrap().len();
    assert_eq!(n as u64, first["nodes"].as_u64().unwrap());
    let (_, comps) = c.get(&s.url(&format!("/mapper/{id}/components")));
    assert_eq!(comps["components"].as_array().unwrap().len() as u64, first["components"].as_u64().unwrap());

    let (code, p) = c.get(&s.url(&format!("/mapper/{id}/path?src=0&dst={}", n - 1)));
    assert_eq!(code, 200);
    let path = p["path"].as_array().unwrap();
    assert_eq!(path.first().unwrap(), 0);
    assert_eq!(path.last().unwrap().as_u64().unwrap() as usize, n - 1);

    let edges = g["edges"].as_array().unwrap();
    let adjacent = |a: usize, b: usize| edges.iter().any(|e| e["a"] == a.min(b) && e["b"] == a.max(b));
    let (a, b) = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .find(|&(a, b)| !adjacent(a, b))
        .unwrap();
    let (code, err) = c.get(&s.url(&format!("/mapper/{id}/element?kind=edge&a={a}&b={b}")));
    assert_eq!(code, 422);
    assert!(err["error"].as_str().unwrap().contains("not adjacent"));

    let e0 = &edges[0];
    let (code, el) = c.get(&s.url(&format!("/mapper/{id}/element?kind=edge&a={}&b={}", e0["a"], e0["b"])));
    assert_eq!(code, 200);
    assert_eq!(el["resolved"]["shared"], e0["shared"]);
    assert!(el["labels"]["region"].is_object());
    assert_eq!(c.get(&s.url(&format!("/mapper/{id}/element?kind=node&id=9999"))).0, 404);
    assert_eq!(c.get(&s.url("/mapper/nonexistent")).0, 404);

    let (code, proj) = c.get(&s.url(&format!("/projection?dataset=circle&layer=1&method=pca&graph_id={id}")));
    assert_eq!(code, 200);
    assert_eq!(proj["points"].as_array().unwrap().len(), 120);
    assert_eq!(proj["layout"].as_object().unwrap().len(), n);
    assert_eq!(c.get(&s.url("/projection?dataset=circle&layer=1&method=tsne")).0, 422);

    let bad = json!({"dataset": "circle", "layer": 1, "params": {"kind": "classical", "cover_n": 0}});
    assert_eq!(c.post(&s.url("/mapper"), &bad).0, 422);
}

#[test]
fn concurrent_identical_requests_compute_once() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Mock);
    let results: Vec<Value> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..8).map(|_| scope.spawn(|| blob_graph(&Client::new(), &s))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.windows(2).all(|w| w[0]["graph_id"] == w[1]["graph_id"]));
    assert_eq!(results.iter().filter(|r| r["cached"] == false).count(), 1);
}

#[test]
fn explain_verify_precompute() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Mock);
    let c = Client::new();
    let g = blob_graph(&c, &s);
    let id = g["graph_id"].as_str().unwrap();

    let (code, job) = c.post(&s.url("/explain"), &json!({"graph_id": id, "selection": "node:0"}));
    assert_eq!(code, 202, "{job}");
    let done = wait_job(&c, &s, &job);
    assert_eq!(done["status"], "done", "{done}");
    let e = &done["result"];
    assert_eq!(e["keywords"].as_array().unwrap().len(), 3);
    let eid = e["id"].as_str().unwrap();
    assert_eq!(c.get(&s.url(&format!("/explanations/{eid}"))).1, *e);

    let (code, job) = c.post(&s.url("/verify"), &json!({"explanation_id": eid}));
    assert_eq!(code, 202);
    let v = wait_job(&c, &s, &job);
    assert_eq!(v["status"], "done", "{v}");
    let score = v["result"]["consistency"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&score));
    assert_eq!(c.post(&s.url("/verify"), &json!({"explanation_id": "missing"})).0, 404);

    let cmp = json!({"graph_id": id, "selection": {"kind": "component", "index": 0}, "operation": "compare", "second": "component:1"});
    let (_, job) = c.post(&s.url("/explain"), &cmp);
    assert_eq!(wait_job(&c, &s, &job)["result"]["template_id"], "node_compare");
    let mixed = json!({"graph_id": id, "selection": "node:0", "operation": "compare", "second": "component:1"});
    assert_eq!(c.post(&s.url("/explain"), &mixed).0, 422);

    let (_, job) = c.post(&s.url("/precompute"), &json!({"graph_id": id}));
    let p = wait_job(&c, &s, &job);
    assert_eq!(p["status"], "done", "{p}");
    // two balls, two components
    assert_eq!(p["result"]["entries"].as_object().unwrap().len(), 4);
    let (code, stored) = c.get(&s.url(&format!("/precompute/{id}")));
    assert_eq!(code, 200);
    assert_eq!(stored, p["result"]);
    let (_, job) = c.post(&s.url("/precompute"), &json!({"graph_id": id}));
    let again = wait_job(&c, &s, &job);
    assert_eq!((again["result"]["computed"].as_u64(), again["result"]["cached"].as_u64()), (Some(0), Some(4)));
}

#[test]
fn annotations_are_durable() {
    let dir = tempfile::tempdir().unwrap();
    let datasets = dir.path().join("datasets");
    write_datasets(&datasets);
    let c = Client::new();
    let s = start(&datasets, dir.path(), Providers::Mock);
    let g = blob_graph(&c, &s);
    let gid = g["graph_id"].as_str().unwrap().to_string();

    let (code, a) = c.post(
        &s.url("/annotations"),
        &json!({"graph_id": gid, "element": "node:1", "text": "left blob", "keywords": ["a", "b", "c"]}),
    );
    assert_eq!(code, 201, "{a}");
    assert_eq!(a["version"], 1);
    let aid = a["id"].as_str().unwrap().to_string();
    let (code, other) = c.post(&s.url("/annotations"), &json!({"graph_id": gid, "element": {"kind": "node", "id": 0}, "text": "x"}));
    assert_eq!(code, 201);
    assert_eq!(
        c.post(&s.url("/annotations"), &json!({"graph_id": gid, "element": "node:99", "text": "x"})).0,
        404
    );
    assert_eq!(
        c.post(&s.url("/annotations"), &json!({"graph_id": gid, "element": "edge:0-1", "text": "x"})).0,
        422
    );

    let (_, filtered) = c.get(&s.url("/annotations?element=node:1"));
    assert_eq!(filtered.as_array().unwrap().len(), 1);
    assert_eq!(filtered[0]["id"], aid.as_str());

    let (code, upd) = c.patch(&s.url(&format!("/annotations/{aid}")), &json!({"text": "left blob, edited", "version": 1}));
    assert_eq!(code, 200);
    assert_eq!(upd["version"], 2);
    assert!(upd["modified"].as_str().unwrap() > a["modified"].as_str().unwrap());
    s.stop().unwrap();

    let s = start(&datasets, dir.path(), Providers::Mock);
    let (code, after) = c.get(&s.url(&format!("/annotations/{aid}")));
    assert_eq!(code, 200);
    assert_eq!(after, upd);
    let (_, g2) = c.post(&s.url("/mapper"), &json!({"dataset": "blobs", "layer": 1, "params": {"kind": "ball", "epsilon": 3.0}}));
    assert_eq!(g2["cached"], true);
    let (_, session) = c.get(&s.url(&format!("/sessions/{gid}")));
    assert_eq!(session["annotations"].as_array().unwrap().len(), 2);

    assert_eq!(c.delete(&s.url(&format!("/annotations/{aid}"))).0, 204);
    assert_eq!(c.get(&s.url(&format!("/annotations/{aid}"))).0, 404);
    s.stop().unwrap();
    let s = start(&datasets, dir.path(), Providers::Mock);
    assert_eq!(c.get(&s.url(&format!("/annotations/{aid}"))).0, 404);
    assert_eq!(c.get(&s.url(&format!("/annotations/{}", other["id"].as_str().unwrap()))).0, 200);
}

#[test]
fn sessions_record_explanations() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Mock);
    let c = Client::new();
    let body = json!({"id": "desk", "dataset": "blobs", "layer": 1, "params": {"kind": "ball", "epsilon": 3.0}});
    let (code, session) = c.post(&s.url("/sessions"), &body);
    assert_eq!(code, 201, "{session}");
    let gid = session["graph_id"].as_str().unwrap();
    let (_, job) = c.post(&s.url("/explain"), &json!({"graph_id": gid, "selection": "node:0", "session_id": "desk"}));
    let e = wait_job(&c, &s, &job);
    let (_, session) = c.get(&s.url("/sessions/desk"));
    assert_eq!(session["explanations"], json!([e["result"]["id"]]));
    let bad = json!({"id": "../x", "dataset": "blobs", "layer": 1, "params": {"kind": "ball", "epsilon": 3.0}});
    assert_eq!(c.post(&s.url("/sessions"), &bad).0, 400);
}

#[test]
fn trajectory_job_and_edits() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Mock);
    let c = Client::new();
    let g = blob_graph(&c, &s);
    let gid = g["graph_id"].as_str().unwrap();
    let (_, f) = c.get(&s.url("/datasets/blobs/filter?query=as"));
    let pts: Vec<u64> = f["points"].as_array().unwrap().iter().map(|p| p.as_u64().unwrap()).collect();
    assert!(pts.len() >= 2);
    let (code, job) = c.post(
        &s.url("/trajectory"),
        &json!({"graph_id": gid, "source_pt": pts[0], "target_pt": pts[pts.len() - 1], "k": 4}),
    );
    assert_eq!(code, 202);
    let done = wait_job(&c, &s, &job);
    assert_eq!(done["status"], "done", "{done}");
    let t = &done["result"];
    let steps = t["steps"].as_array().unwrap().len();
    assert!(steps >= 2);
    let tid = t["id"].as_str().unwrap();

    let (code, edited) = c.patch(&s.url(&format!("/trajectory/{tid}")), &json!({"op": "delete", "index": 1}));
    if steps > 2 {
        assert_eq!(code, 200, "{edited}");
        assert_eq!(edited["trajectory"]["steps"].as_array().unwrap().len(), steps - 1);
        let (_, fetched) = c.get(&s.url(&format!("/trajectory/{tid}")));
        assert_eq!(fetched, edited);
    }
    let (code, _) = c.patch(&s.url(&format!("/trajectory/{tid}")), &json!({"op": "delete", "index": 0}));
    assert_eq!(code, 422);
    let (code, ins) = c.patch(
        &s.url(&format!("/trajectory/{tid}")),
        &json!({"op": "insert", "index": 1, "text": "as we said"}),
    );
    assert_eq!(code, 200, "{ins}");
    assert_eq!(ins["trajectory"]["steps"][1]["text"], "as we said");
    assert_eq!(c.get(&s.url("/trajectory/none")).0, 404);
}

#[test]
fn unreachable_provider_fails_the_job() {
    let dir = tempfile::tempdir().unwrap();
    write_datasets(&dir.path().join("datasets"));
    let dead = "http://127.0.0.1:9".to_string();
    let cfg = ProviderConfig {
        chat_url: Some(dead.clone()),
        sentence_url: Some(dead.clone()),
        occurrence_url: Some(dead),
        attempts: 1,
        timeout_secs: 2,
        ..Default::default()
    };
    let s = start(&dir.path().join("datasets"), dir.path(), Providers::Http(cfg));
    let c = Client::new();
    let g = blob_graph(&c, &s);
    let (_, job) = c.post(&s.url("/explain"), &json!({"graph_id": g["graph_id"], "selection": "node:0"}));
    let j = wait_job(&c, &s, &job);
    assert_eq!(j["status"], "failed");
    assert_eq!(j["error"]["provider"], true);

    let unconfigured = start(&dir.path().join("datasets"), dir.path(), Providers::Http(ProviderConfig::default()));
    let (code, err) = c.post(&unconfigured.url("/explain"), &json!({"graph_id": g["graph_id"], "selection": "node:0"}));
    assert_eq!(code, 502, "{err}");
}
