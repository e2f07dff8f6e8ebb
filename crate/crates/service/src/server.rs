//! Router, shared state and handlers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use archplate_core::constitutive::Material;
use archplate_core::design_search::{beam_search_observed, Evaluator, FemEvaluator, ProxyEvaluator, SearchLog};
use archplate_core::fem_solver::FemError;
use archplate_core::lattice_graph::validate_graph;
use archplate_core::mesh_forge::{block_mesh, fps_sample, MeshError, TetMesh};
use archplate_core::world_env::{
    create_session, export_trajectory, Action, EnvError, Geometry, Regime, SessionSpec, SharedSession,
};
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::sync::watch;

use crate::protocol::*;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StreamState {
    frames: usize,
    closed: bool,
}

pub struct SessionEntry {
    pub id: String,
    pub shared: SharedSession,
    rest: Vec<Vector3<f64>>,
    coarse_maps: Mutex<HashMap<usize, Arc<Vec<usize>>>>,
    updates: watch::Sender<StreamState>,
    seed: u64,
}

impl SessionEntry {
    /// Furthest-point subset for `count`, computed once per session.
    fn coarse_map(&self, count: usize) -> Result<Arc<Vec<usize>>, MeshError> {
        let mut maps = self.coarse_maps.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(m) = maps.get(&count) {
            return Ok(m.clone());
        }
        let map = Arc::new(fps_sample(&self.rest, count, self.seed)?);
        maps.insert(count, map.clone());
        Ok(map)
    }
}

struct SearchJob {
    key: Option<String>,
    cancel: AtomicBool,
    progress: Mutex<(JobState, SearchLog, Option<String>)>,
}

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    jobs: RwLock<HashMap<String, Arc<SearchJob>>>,
    next_id: AtomicU64,
    data_dir: Option<PathBuf>,
}

impl AppState {
    /// `data_dir` receives the trajectory of every deleted session.
    pub fn new(data_dir: Option<PathBuf>) -> Self {
        Self { data_dir, ..Default::default() }
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1)
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionEntry>> {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    fn job(&self, id: &str) -> Option<Arc<SearchJob>> {
        self.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session_endpoint))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/step", post(step_endpoint))
        .route("/sessions/{id}/frames/{t}", get(get_frame))
        .route("/sessions/{id}/stream", get(frame_stream))
        .route("/search", post(start_search))
        .route("/search/{id}/status", get(search_status))
        .route("/search/{id}/log", get(search_log))
        .route("/search/{id}/cancel", post(cancel_search))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, data_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(AppState::new(data_dir))))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody::new(message) }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<EnvError> for ApiError {
    fn from(e: EnvError) -> Self {
        let message = e.to_string();
        match e {
            EnvError::Mesh(MeshError::Percolation(report)) => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody { report: serde_json::to_value(report).ok(), ..ErrorBody::new(message) },
            },
            EnvError::Mesh(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, message),
            EnvError::Busy => Self::new(StatusCode::CONFLICT, message),
            EnvError::Diverged { last_good, .. } => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                body: ErrorBody { last_good: Some(last_good), ..ErrorBody::new(message) },
            },
            EnvError::Fem(FemError::InvalidConfig(_))
            | EnvError::RegimeMismatch(_)
            | EnvError::InvalidAction(_)
            | EnvError::InvalidSequence(_) => Self::bad_request(message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, message),
        }
    }
}

/// Parses a JSON body; every failure is a 400.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid payload: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))
}

fn mesh_from_request(nodes: Vec<[f64; 3]>, tets: Vec<[usize; 4]>) -> Result<TetMesh, ApiError> {
    if tets.is_empty() {
        return Err(ApiError::bad_request("mesh has no tetrahedra"));
    }
    if nodes.iter().flatten().any(|c| !c.is_finite()) {
        return Err(ApiError::bad_request("mesh has non-finite coordinates"));
    }
    if let Some(t) = tets.iter().find(|t| t.iter().any(|&n| n >= nodes.len())) {
        return Err(ApiError::bad_request(format!("tet {t:?} references a missing node")));
    }
    let nodes: Vec<Vector3<f64>> = nodes.into_iter().map(Vector3::from).collect();
    let lo = nodes.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = nodes.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    Ok(TetMesh::from_tets(nodes, tets, lo, hi))
}

async fn create_session_endpoint(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSessionRequest = parse_body(&body)?;
    if let Material::NeoHookean(nh) = &req.material {
        nh.check().map_err(|e| ApiError::bad_request(e.to_string()))?;
    }
    let geometry = match req.geometry {
        GeometryRequest::Graph { graph, mesh } => {
            let report = validate_graph(&graph);
            if !report.pass {
                let rules: Vec<String> = report.failed_rules().iter().map(|r| r.to_string()).collect();
                return Err(ApiError {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    body: ErrorBody {
                        rules: Some(rules.clone()),
                        report: serde_json::to_value(&report).ok(),
                        ..ErrorBody::new(format!("graph failed validation: {}", rules.join(", ")))
                    },
                });
            }
            Geometry::Graph { graph, mesh }
        }
        GeometryRequest::Mesh { nodes, tets } => Geometry::Mesh { mesh: Arc::new(mesh_from_request(nodes, tets)?) },
        GeometryRequest::Block { extent, dims } => {
            if extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) || dims.contains(&0) {
                return Err(ApiError::bad_request("block needs positive extent and dims"));
            }
            Geometry::Mesh { mesh: Arc::new(block_mesh(Vector3::from(extent), dims)) }
        }
    };
    let regime = req.regime.unwrap_or(if req.material.density() > 0.0 { Regime::Dynamic } else { Regime::Quasistatic });
    let mut spec = SessionSpec::new(geometry, req.material, regime);
    spec.solver = req.solver;
    spec.seed = req.seed;
    let seed = req.seed;
    let session = blocking(move || create_session(spec)).await??;
    let id = app.fresh_id("s");
    let rest = session.mesh().nodes.clone();
    let response = CreateSessionResponse {
        id: id.clone(),
        node_count: rest.len(),
        tet_count: session.mesh().tets.len(),
        regime,
        frame: FrameSummary::from(session.last_frame().as_ref()),
    };
    let shared = SharedSession::new(session);
    let (updates, _) = watch::channel(StreamState { frames: shared.frame_count(), closed: false });
    let entry = SessionEntry { id: id.clone(), shared, rest, coarse_maps: Mutex::default(), updates, seed };
    app.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id, Arc::new(entry));
    Ok((StatusCode::CREATED, Json(response)).into_response())
}

async fn step_endpoint(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<FrameSummary>, ApiError> {
    let entry = app.session(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    let req: StepRequest = parse_body(&body)?;
    let action = Action(req.action);
    action.validate()?;
    let worker = entry.clone();
    let frame = blocking(move || worker.shared.try_step(action)).await??;
    let frames = entry.shared.frame_count();
    entry.updates.send_modify(|s| s.frames = frames);
    Ok(Json(FrameSummary::from(frame.as_ref())))
}

async fn get_frame(
    State(app): State<Arc<AppState>>,
    Path((id, t)): Path<(String, usize)>,
) -> Result<Json<WireFrame>, ApiError> {
    let entry = app.session(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    let frame = entry.shared.frame(t).ok_or_else(|| ApiError::not_found("frame", &t.to_string()))?;
    Ok(Json(WireFrame::build(&frame, &entry.rest, Decimation::Full, None)))
}

async fn delete_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<DeleteSessionResponse>, ApiError> {
    let entry = app
        .sessions
        .write()
        .unwrap_or_else(|p| p.into_inner())
        .remove(&id)
        .ok_or_else(|| ApiError::not_found("session", &id))?;
    entry.updates.send_modify(|s| s.closed = true);
    let frames = entry.shared.frame_count();
    let trajectory = match app.data_dir.clone() {
        Some(dir) => {
            let path = dir.join(format!("session_{id}.bin"));
            let target = path.clone();
            blocking(move || {
                std::fs::create_dir_all(&dir)?;
                let traj = entry.shared.with_session(|s| s.trajectory());
                export_trajectory(&traj, &target)
            })
            .await??;
            Some(path.display().to_string())
        }
        None => None,
    };
    Ok(Json(DeleteSessionResponse { id, frames, trajectory }))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    decimation: Option<String>,
    from: Option<usize>,
}

async fn frame_stream(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let entry = app.session(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    let decimation: Decimation = match q.decimation.as_deref() {
        Some(text) => text.parse().map_err(|e: ParseDecimationError| ApiError::bad_request(e.to_string()))?,
        None => Decimation::Full,
    };
    let index_map = match decimation {
        Decimation::Full => None,
        Decimation::Coarse { count } => {
            if count > entry.rest.len() {
                return Err(ApiError::bad_request(format!(
                    "coarse({count}) exceeds the {} mesh nodes",
                    entry.rest.len()
                )));
            }
            let worker = entry.clone();
            Some(blocking(move || worker.coarse_map(count)).await?.map_err(|e| ApiError::bad_request(e.to_string()))?)
        }
    };
    let from = q.from.unwrap_or_else(|| entry.shared.frame_count());
    Ok(ws
        .protocols([BINARY_SUBPROTOCOL])
        .on_upgrade(move |socket| stream_frames(socket, entry, decimation, index_map, from)))
}

async fn stream_frames(
    mut socket: WebSocket,
    entry: Arc<SessionEntry>,
    decimation: Decimation,
    index_map: Option<Arc<Vec<usize>>>,
    from: usize,
) {
    let binary = socket.protocol().is_some_and(|p| p.as_bytes() == BINARY_SUBPROTOCOL.as_bytes());
    let mut updates = entry.updates.subscribe();
    let hello = StreamMessage::Subscribed {
        session: entry.id.clone(),
        decimation,
        total_nodes: entry.rest.len(),
        index_map: index_map.as_ref().map(|m| m.to_vec()),
        from_step: from,
        binary,
    };
    if send_json(&mut socket, &hello).await.is_err() {
        return;
    }
    let indices = index_map.as_deref().map(|m| m.as_slice());
    let mut next = from;
    loop {
        let state = *updates.borrow_and_update();
        while next < state.frames {
            let Some(frame) = entry.shared.frame(next) else { break };
            let sent = if binary {
                let bytes = encode_binary_frame(&frame, &entry.rest, decimation, indices);
                socket.send(Message::Binary(bytes.into())).await
            } else {
                send_json(&mut socket, &StreamMessage::Frame(WireFrame::build(&frame, &entry.rest, decimation, indices))).await
            };
            if sent.is_err() {
                return;
            }
            next += 1;
        }
        if state.closed {
            let _ = send_json(&mut socket, &StreamMessage::Closed { reason: "session deleted".into() }).await;
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
        tokio::select! {
            changed = updates.changed() => {
                if changed.is_err() {
                    let _ = send_json(&mut socket, &StreamMessage::Closed { reason: "session dropped".into() }).await;
                    return;
                }
            }
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn send_json(socket: &mut WebSocket, msg: &StreamMessage) -> Result<(), axum::Error> {
    let text = serde_json::to_string(msg).expect("stream messages serialize");
    socket.send(Message::Text(text.into())).await
}

async fn start_search(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: SearchRequest = parse_body(&body)?;
    req.config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let report = validate_graph(&req.seed);
    if !report.pass {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                rules: Some(report.failed_rules().iter().map(|r| r.to_string()).collect()),
                ..ErrorBody::new("seed graph failed validation")
            },
        });
    }
    let job = Arc::new(SearchJob {
        key: req.job_key.clone(),
        cancel: AtomicBool::new(false),
        progress: Mutex::new((JobState::Running, SearchLog::default(), None)),
    });
    let id = {
        let mut jobs = app.jobs.write().unwrap_or_else(|p| p.into_inner());
        if let Some(key) = &req.job_key {
            if let Some((existing, _)) = jobs.iter().find(|(_, j)| j.key.as_deref() == Some(key)) {
                return Err(ApiError::new(StatusCode::CONFLICT, format!("job key {key} already started as {existing}")));
            }
        }
        let id = app.fresh_id("j");
        jobs.insert(id.clone(), job.clone());
        id
    };
    std::thread::Builder::new()
        .name(format!("search-{id}"))
        .spawn(move || run_search(job, req))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((StatusCode::ACCEPTED, Json(SearchCreated { id })).into_response())
}

fn run_search(job: Arc<SearchJob>, req: SearchRequest) {
    let evaluator: Box<dyn Evaluator> = match req.evaluator {
        EvaluatorKind::Fem => Box::new(FemEvaluator::new(req.mesh.clone().unwrap_or_default(), &req.config)),
        EvaluatorKind::Proxy => Box::new(ProxyEvaluator::new(&req.config)),
    };
    let result = beam_search_observed(&req.seed, evaluator.as_ref(), &req.config, &job.cancel, &mut |log| {
        job.progress.lock().unwrap_or_else(|p| p.into_inner()).1 = log.clone();
    });
    let mut progress = job.progress.lock().unwrap_or_else(|p| p.into_inner());
    match result {
        Ok(log) => {
            progress.0 = if log.cancelled { JobState::Cancelled } else { JobState::Completed };
            progress.1 = log;
        }
        Err(e) => {
            progress.0 = JobState::Failed;
            progress.2 = Some(e.to_string());
        }
    }
}

async fn search_status(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SearchStatus>, ApiError> {
    let job = app.job(&id).ok_or_else(|| ApiError::not_found("search job", &id))?;
    let progress = job.progress.lock().unwrap_or_else(|p| p.into_inner());
    Ok(Json(SearchStatus::from_log(&id, progress.0, &progress.1, progress.2.clone())))
}

async fn search_log(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = app.job(&id).ok_or_else(|| ApiError::not_found("search job", &id))?;
    let text = job.progress.lock().unwrap_or_else(|p| p.into_inner()).1.to_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn cancel_search(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = app.job(&id).ok_or_else(|| ApiError::not_found("search job", &id))?;
    job.cancel.store(true, Ordering::SeqCst);
    let progress = job.progress.lock().unwrap_or_else(|p| p.into_inner());
    let status = SearchStatus::from_log(&id, progress.0, &progress.1, progress.2.clone());
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}
