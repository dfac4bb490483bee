//! HTTP/JSON facade over [`cjt_core::manager::Manager`].
//!
//! Requests for one (session, viz) pair are serialized in arrival order;
//! engine work runs on the blocking pool so the reactor stays free.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cjt_core::error::Error;
use cjt_core::jointree::{GraphDoc, JoinGraph, QuerySpec};
use cjt_core::manager::{InteractStats, Manager, ManagerConfig, QueryDelta};
use cjt_core::relation::{AnnotatedRelation, AttrType};
use cjt_core::semiring::{solve_linreg, Annotation, DEFAULT_RIDGE};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub manager: ManagerConfig,
    /// Relative CSV paths in posted graph documents resolve against this.
    pub data_root: PathBuf,
    /// Built UI bundle served under `/`.
    pub static_dir: Option<PathBuf>,
}

type SlotLock = Arc<tokio::sync::Mutex<()>>;

#[derive(Clone)]
pub struct AppState {
    pub manager: Arc<Manager>,
    data_root: Arc<PathBuf>,
    slots: Arc<Mutex<HashMap<(String, String), SlotLock>>>,
}

impl AppState {
    pub fn new(manager: Arc<Manager>, data_root: PathBuf) -> AppState {
        AppState { manager, data_root: Arc::new(data_root), slots: Arc::default() }
    }

    fn slot(&self, sid: &str, vid: &str) -> SlotLock {
        self.slots.lock().unwrap().entry((sid.to_string(), vid.to_string())).or_default().clone()
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::NotFound { .. } => StatusCode::NOT_FOUND,
        Error::Conflict(_) => StatusCode::CONFLICT,
        Error::MissingMessage { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.0.code(), "message": self.0.to_string() } });
        (status_of(&self.0), Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    Ok(serde_json::from_slice(text).map_err(Error::from)?)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> cjt_core::Result<T> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::InvalidParameter(format!("worker failed: {e}")))),
    }
}

/// Answer rows as `{"group": [...], "value": ...}`; gram annotations are
/// replaced by their least-squares solution.
pub fn answer_json(rel: &AnnotatedRelation) -> Value {
    let attrs: Vec<String> = rel.attrs().iter().map(|a| a.to_string()).collect();
    let rows: Vec<Value> = match rel.kind() {
        cjt_core::semiring::SemiringKind::Gram { .. } => {
            let mut rows: Vec<&(Box<[cjt_core::value::Value]>, Annotation)> = rel.rows().iter().collect();
            rows.sort_by(|a, b| {
                a.0.iter().zip(b.0.iter()).map(|(x, y)| x.cmp_semantic(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            });
            rows.into_iter()
                .map(|(t, a)| {
                    let group: Vec<Value> = t.iter().map(|v| v.to_json()).collect();
                    let g = a.as_gram().expect("gram relation");
                    let value = match solve_linreg(a, DEFAULT_RIDGE) {
                        Ok(m) => json!({
                            "count": g.count(),
                            "intercept": m.intercept,
                            "weights": m.weights,
                            "r2": m.r2(g),
                        }),
                        Err(e) => json!({ "count": g.count(), "error": e.code() }),
                    };
                    json!({ "group": group, "value": value })
                })
                .collect()
        }
        _ => rel.to_json_rows(),
    };
    json!({ "attrs": attrs, "kind": rel.kind().to_string(), "rows": rows })
}

fn stats_json(s: &InteractStats) -> Value {
    json!({
        "computed": s.messages_computed,
        "reused": s.messages_reused,
        "steiner_bags": s.steiner_bags,
        "max_intermediate_rows": s.max_intermediate_rows,
        "latency_ms": s.latency_ms,
        "base": s.base,
        "calibration_status": s.calibration_status,
    })
}

fn graph_json(m: &Manager, id: &str) -> Result<Value, ApiError> {
    let e = m.graph(id)?;
    let relations: Vec<Value> = e
        .graph
        .relations()
        .map(|r| {
            let attrs: Vec<Value> = r
                .schema
                .attributes
                .iter()
                .map(|a| json!({ "name": a.name, "type": if a.ty == AttrType::Numeric { "numeric" } else { "categorical" } }))
                .collect();
            json!({
                "name": r.name,
                "attributes": attrs,
                "versions": r.versions.keys().collect::<Vec<_>>(),
                "default_version": r.default_version,
                "rows": r.versions[&r.default_version].rows.len(),
            })
        })
        .collect();
    let bags: Vec<Value> = e
        .jt
        .bags()
        .iter()
        .map(|b| json!({ "id": b.id, "attrs": b.attrs.iter().map(|a| a.to_string()).collect::<Vec<_>>(), "relations": b.relations }))
        .collect();
    Ok(json!({ "graph_id": e.id, "relations": relations, "bags": bags, "edges": e.jt.edges() }))
}

async fn post_graph(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let doc: GraphDoc = parse(&body)?;
    let root = st.data_root.clone();
    let m = st.manager.clone();
    let id = blocking(move || {
        let g = JoinGraph::from_doc(&doc, &root)?;
        m.register_graph(g)
    })
    .await?;
    Ok(Json(graph_json(&st.manager, &id)?))
}

async fn get_graph(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(graph_json(&st.manager, &id)?))
}

#[derive(Deserialize)]
struct DashboardReq {
    #[serde(default)]
    viz_id: Option<String>,
    #[serde(flatten)]
    query: QuerySpec,
}

async fn post_dashboard(State(st): State<AppState>, Path(gid): Path<String>, body: Bytes) -> ApiResult {
    let req: DashboardReq = parse(&body)?;
    let m = st.manager.clone();
    let q = req.query.clone();
    let (viz, answer) = blocking(move || m.register_dashboard_query(&gid, req.viz_id.as_deref(), &req.query)).await?;
    Ok(Json(json!({ "viz_id": viz, "answer": answer_json(&answer), "query": q })))
}

async fn get_vizzes(State(st): State<AppState>) -> ApiResult {
    Ok(Json(json!({ "viz_ids": st.manager.viz_ids() })))
}

async fn post_session(State(st): State<AppState>) -> ApiResult {
    Ok(Json(json!({ "session_id": st.manager.create_session() })))
}

async fn post_interact(State(st): State<AppState>, Path((sid, vid)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let delta: QueryDelta = parse(&body)?;
    let lock = st.slot(&sid, &vid);
    let _turn = lock.lock().await;
    let m = st.manager.clone();
    let (res, q) = blocking(move || {
        let r = m.interact_delta(&sid, &vid, &delta)?;
        let q = m.current_query(&sid, &vid)?;
        Ok((r, q))
    })
    .await?;
    Ok(Json(json!({ "answer": answer_json(&res.answer), "stats": stats_json(&res.stats), "query": q })))
}

async fn get_stats(State(st): State<AppState>, Path((sid, vid)): Path<(String, String)>) -> ApiResult {
    let s = st.manager.stats(&sid, &vid)?;
    Ok(Json(serde_json::to_value(s).map_err(Error::from)?))
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ThinkReq {
    /// Message budget; absent means until calibrated.
    budget: Option<usize>,
}

async fn post_think(State(st): State<AppState>, Path((sid, vid)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: ThinkReq = parse(&body)?;
    let lock = st.slot(&sid, &vid);
    let _turn = lock.lock().await;
    let m = st.manager.clone();
    let (s2, v2) = (sid.clone(), vid.clone());
    let done = blocking(move || {
        m.wait_background(&s2, &v2)?;
        m.think(&s2, &v2, req.budget.unwrap_or(usize::MAX))
    })
    .await?;
    let s = st.manager.stats(&sid, &vid)?;
    Ok(Json(json!({ "computed": done, "stats": s })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheReq {
    budget_rows: usize,
}

async fn get_cache(State(st): State<AppState>) -> ApiResult {
    Ok(Json(serde_json::to_value(st.manager.cache().info()).map_err(Error::from)?))
}

async fn post_cache(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: CacheReq = parse(&body)?;
    st.manager.cache().set_budget(req.budget_rows);
    get_cache(State(st)).await
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/graphs", post(post_graph))
        .route("/graphs/{id}", get(get_graph))
        .route("/graphs/{id}/dashboards", post(post_dashboard))
        .route("/dashboards", get(get_vizzes))
        .route("/sessions", post(post_session))
        .route("/sessions/{sid}/viz/{vid}/interact", post(post_interact))
        .route("/sessions/{sid}/viz/{vid}/stats", get(get_stats))
        .route("/sessions/{sid}/viz/{vid}/think", post(post_think))
        .route("/admin/cache", get(get_cache).post(post_cache))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub fn app(config: ServerConfig) -> Router {
    let state = AppState::new(Arc::new(Manager::new(config.manager)), config.data_root);
    router(state, config.static_dir)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, config: ServerConfig) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app(config)).await
}
