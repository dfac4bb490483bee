use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cjt_core::engine::oracle_execute;
use cjt_core::jointree::{GraphDoc, JoinGraph, QuerySpec};
use cjt_core::manager::{BackgroundMode, Manager, ManagerConfig, QueryDelta};
use cjt_server::{answer_json, app, router, AppState, ServerConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn graph_doc() -> Value {
    let cat = |n: &str| json!({ "name": n, "type": "categorical" });
    let rel = |name: &str, attrs: [&str; 2], rows: Vec<[&str; 2]>| {
        json!({ "name": name, "schema": { "attributes": [cat(attrs[0]), cat(attrs[1])] }, "rows": rows })
    };
    json!({
        "relations": [
            rel("R", ["A", "B"], vec![["a1", "b1"], ["a1", "b1"], ["a1", "b2"], ["a1", "b2"], ["a1", "b2"], ["a2", "b1"]]),
            rel("S", ["A", "C"], vec![["a1", "c1"], ["a1", "c1"], ["a1", "c1"], ["a1", "c2"], ["a2", "c2"]]),
            rel("T", ["A", "D"], vec![["a1", "d1"], ["a1", "d2"], ["a1", "d2"], ["a2", "d1"]]),
        ],
        "edges": [["R", "S"], ["S", "T"]],
    })
}

fn graph() -> JoinGraph {
    let doc: GraphDoc = serde_json::from_value(graph_doc()).unwrap();
    JoinGraph::from_doc(&doc, &PathBuf::new()).unwrap()
}

fn config(mode: BackgroundMode) -> ServerConfig {
    ServerConfig { manager: ManagerConfig { background: mode, ..Default::default() }, ..Default::default() }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn setup(app: &Router, dashboard: Value) -> (String, String, String) {
    let (s, g) = call(app, "POST", "/graphs", Some(graph_doc())).await;
    assert_eq!(s, StatusCode::OK, "{g}");
    let gid = g["graph_id"].as_str().unwrap().to_string();
    let (s, d) = call(app, "POST", &format!("/graphs/{gid}/dashboards"), Some(dashboard)).await;
    assert_eq!(s, StatusCode::OK, "{d}");
    let vid = d["viz_id"].as_str().unwrap().to_string();
    let (_, sess) = call(app, "POST", "/sessions", None).await;
    (gid, vid, sess["session_id"].as_str().unwrap().to_string())
}

fn oracle_json(q: &QuerySpec) -> Value {
    answer_json(&oracle_execute(&graph(), q, 1 << 20).unwrap())
}

#[tokio::test]
async fn register_interact_and_stats() {
    let app = app(config(BackgroundMode::Manual));
    let (gid, vid, sid) = setup(&app, json!({ "group_by": ["B"] })).await;
    let (s, info) = call(&app, "GET", &format!("/graphs/{gid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["relations"].as_array().unwrap().len(), 3);
    assert_eq!(info["bags"].as_array().unwrap().len(), 3);

    let url = format!("/sessions/{sid}/viz/{vid}/interact");
    // identical query: nothing to compute
    let (s, r) = call(&app, "POST", &url, Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["stats"]["computed"], 0);
    assert_eq!(r["answer"], oracle_json(&QuerySpec::count().group_by(&["B"])));

    let delta = json!({ "add_filters": [{ "attr": "D", "op": "=", "value": "d2" }] });
    let (_, r) = call(&app, "POST", &url, Some(delta)).await;
    let q: QuerySpec = serde_json::from_value(r["query"].clone()).unwrap();
    assert_eq!(r["answer"], oracle_json(&q));
    assert!(r["stats"]["reused"].as_u64().unwrap() > 0);

    let (_, t) = call(&app, "POST", &format!("/sessions/{sid}/viz/{vid}/think"), None).await;
    assert_eq!(t["stats"]["calibration_status"]["state"], "full", "{t}");
    let (s, st) = call(&app, "GET", &format!("/sessions/{sid}/viz/{vid}/stats"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(st["interactions"], 2);
    assert_eq!(st["messages_done"], st["messages_total"]);
}

#[tokio::test]
async fn error_codes() {
    let app = app(config(BackgroundMode::Off));
    let (gid, vid, sid) = setup(&app, json!({ "viz_id": "bars" })).await;
    assert_eq!(vid, "bars");

    let (s, e) = call(&app, "POST", &format!("/graphs/{gid}/dashboards"), Some(json!({ "viz_id": "bars" }))).await;
    assert_eq!((s, e["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (s, e) = call(&app, "POST", "/graphs/nope/dashboards", Some(json!({}))).await;
    assert_eq!((s, e["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let (s, e) = call(&app, "POST", &format!("/sessions/s999/viz/{vid}/interact"), Some(json!({}))).await;
    assert_eq!((s, e["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let (s, e) = call(&app, "POST", &format!("/sessions/{sid}/viz/{vid}/interact"), Some(json!({ "bogus": 1 }))).await;
    assert_eq!((s, e["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_json")));

    let bad = json!({ "add_filters": [{ "attr": "Z", "op": "=", "value": "x" }] });
    let (s, e) = call(&app, "POST", &format!("/sessions/{sid}/viz/{vid}/interact"), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{e}");
    assert_eq!(e["error"]["code"], "unknown_attribute");

    let cyclic = json!({ "relations": [
        { "name": "X", "schema": { "attributes": [{ "name": "A" }, { "name": "B" }] }, "rows": [] },
        { "name": "Y", "schema": { "attributes": [{ "name": "B" }, { "name": "C" }] }, "rows": [] },
        { "name": "Z", "schema": { "attributes": [{ "name": "C" }, { "name": "A" }] }, "rows": [] },
    ]});
    let (s, e) = call(&app, "POST", "/graphs", Some(cyclic)).await;
    assert_eq!((s, e["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("cyclic_graph")));

    let missing = json!({ "relations": [{ "name": "X", "csv": "no/such.csv", "schema": { "attributes": [{ "name": "A" }] } }] });
    let (s, e) = call(&app, "POST", "/graphs", Some(missing)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(e["error"]["message"].as_str().unwrap().contains("no/such.csv"), "{e}");
}

#[tokio::test]
async fn cache_admin() {
    let app = app(config(BackgroundMode::Off));
    setup(&app, json!({})).await;
    let (s, c) = call(&app, "GET", "/admin/cache", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(c["pinned"].as_u64().unwrap() > 0, "{c}");
    let (_, c) = call(&app, "POST", "/admin/cache", Some(json!({ "budget_rows": 5 }))).await;
    assert_eq!(c["budget_rows"], 5);
    let (s, _) = call(&app, "POST", "/admin/cache", Some(json!({ "rows": 5 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn api_answers_equal_direct_manager_calls() {
    let manager = Arc::new(Manager::new(ManagerConfig { background: BackgroundMode::Off, ..Default::default() }));
    let app = router(AppState::new(manager, PathBuf::new()), None);
    let direct = Manager::new(ManagerConfig { background: BackgroundMode::Off, ..Default::default() });
    let dgid = direct.register_graph(graph()).unwrap();
    let (dvid, _) = direct.register_dashboard_query(&dgid, Some("v"), &QuerySpec::count().group_by(&["C"])).unwrap();
    let dsid = direct.create_session();

    let (_, vid, sid) = setup(&app, json!({ "viz_id": "v", "group_by": ["C"] })).await;
    let deltas = vec![
        json!({ "add_filters": [{ "attr": "B", "op": "=", "value": "b2" }] }),
        json!({ "add_group_by": ["D"] }),
        json!({ "remove_group_by": ["D"], "exclude": ["T"] }),
        json!({ "include": ["T"], "clear_filters_on": ["B"] }),
        json!({ "remove_group_by": ["C"] }),
    ];
    for d in deltas {
        let (s, r) = call(&app, "POST", &format!("/sessions/{sid}/viz/{vid}/interact"), Some(d.clone())).await;
        assert_eq!(s, StatusCode::OK, "{r}");
        let delta: QueryDelta = serde_json::from_value(d).unwrap();
        let res = direct.interact_delta(&dsid, &dvid, &delta).unwrap();
        assert_eq!(r["answer"], answer_json(&res.answer));
        assert_eq!(r["stats"]["computed"], res.stats.messages_computed);
    }
}

#[tokio::test]
async fn gram_answers_are_coefficients() {
    let app = app(config(BackgroundMode::Off));
    let doc = json!({ "relations": [
        { "name": "P", "schema": { "attributes": [{ "name": "K" }, { "name": "x", "type": "numeric" }] },
          "rows": [["k1", 1], ["k2", 2], ["k3", 3], ["k4", 4]] },
        { "name": "Q", "schema": { "attributes": [{ "name": "K" }, { "name": "y", "type": "numeric" }] },
          "rows": [["k1", "3"], ["k2", 5], ["k3", 7], ["k4", 9]] },
    ]});
    let (_, g) = call(&app, "POST", "/graphs", Some(doc)).await;
    let gid = g["graph_id"].as_str().unwrap();
    let q = json!({ "aggregate": { "kind": "gram", "features": ["x"], "target": "y" } });
    let (s, d) = call(&app, "POST", &format!("/graphs/{gid}/dashboards"), Some(q)).await;
    assert_eq!(s, StatusCode::OK, "{d}");
    let v = &d["answer"]["rows"][0]["value"];
    assert!((v["intercept"].as_f64().unwrap() - 1.0).abs() < 1e-6, "{v}");
    assert!((v["weights"][0].as_f64().unwrap() - 2.0).abs() < 1e-6);
    assert_eq!(v["count"], 4.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_stay_correct() {
    let app = app(config(BackgroundMode::Thread));
    let (_, vid, sid) = setup(&app, json!({})).await;
    let url = format!("/sessions/{sid}/viz/{vid}/interact");
    let filters = ["b1", "b2", "b1", "b2", "b1", "b2", "b1", "b2"];
    let mut tasks = Vec::new();
    for (i, b) in filters.iter().enumerate() {
        let app = app.clone();
        let url = url.clone();
        let body = json!({ "query": { "group_by": if i % 2 == 0 { vec!["C"] } else { vec!["D"] },
                                      "filters": [{ "attr": "B", "op": "=", "value": b }] } });
        tasks.push(tokio::spawn(async move { call(&app, "POST", &url, Some(body)).await }));
    }
    for t in tasks {
        let (s, r) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK, "{r}");
        let q: QuerySpec = serde_json::from_value(r["query"].clone()).unwrap();
        assert_eq!(r["answer"], oracle_json(&q));
    }
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(cjt_server::serve(listener, config(BackgroundMode::Off)));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"POST /sessions HTTP/1.1\r\nHost: x\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    assert!(buf.contains("\"session_id\":\"s1\""), "{buf}");
}

#[tokio::test]
async fn serves_static_bundle() {
    let dir = std::env::temp_dir().join(format!("cjt-static-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("index.html"), "<html>ok</html>").unwrap();
    let app = router(AppState::new(Arc::new(Manager::new(ManagerConfig::default())), PathBuf::new()), Some(dir.clone()));
    let resp = app.oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    std::fs::remove_dir_all(dir).ok();
}
