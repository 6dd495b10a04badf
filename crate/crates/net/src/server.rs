use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use sgs_core::fabric::wire::{
    ErrorBody, ResultAck, ResultSubmission, TaskResponse, WorkerRequest, HEARTBEAT_PATH, PARAMS_PATH, REQUEST_PATH,
    RESULT_PATH, STATUS_PATH,
};
use sgs_core::fabric::{Fabric, FabricError, TableStatus};
use sgs_core::orchestrator::ParamStore;
use tokio::sync::oneshot;

/// What every handler sees: the task table and the latest Solver weights.
#[derive(Clone)]
pub struct ServerState {
    pub fabric: Arc<Fabric>,
    pub params: ParamStore,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError(
            status,
            ErrorBody {
                error: code.to_string(),
                message: message.into(),
            },
        )
    }
}

impl From<FabricError> for ApiError {
    fn from(e: FabricError) -> Self {
        let status = match e {
            FabricError::UnknownWorker(_) | FabricError::UnknownTask(_) => StatusCode::NOT_FOUND,
            FabricError::DeadWorker(_) => StatusCode::GONE,
            FabricError::NotAssigned { .. } | FabricError::DuplicateTask(_) => StatusCode::CONFLICT,
            FabricError::Stalled(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

async fn request_task(
    State(state): State<ServerState>,
    body: Result<Json<WorkerRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let (assignment, revoked) = state.fabric.next_task(&req.worker_id)?;
    Ok(match assignment {
        Some(a) => {
            tracing::debug!(worker = %req.worker_id, task = %a.task_id, speculative = a.speculative, "assigned");
            Json(TaskResponse::new(a, revoked)).into_response()
        }
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_result(
    State(state): State<ServerState>,
    body: Result<Json<ResultSubmission>, JsonRejection>,
) -> Result<Json<ResultAck>, ApiError> {
    let Json(sub) = body?;
    let status = state.fabric.report(&sub.worker_id, &sub.task_id, sub.payload)?;
    tracing::debug!(worker = %sub.worker_id, task = %sub.task_id, ?status, "result");
    Ok(Json(ResultAck { status }))
}

async fn heartbeat(
    State(state): State<ServerState>,
    body: Result<Json<WorkerRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(req) = body?;
    state.fabric.heartbeat(&req.worker_id);
    Ok(Json(serde_json::json!({})))
}

async fn status(State(state): State<ServerState>) -> Json<TableStatus> {
    Json(state.fabric.status())
}

async fn params(State(state): State<ServerState>, Path(version): Path<u64>) -> Result<Response, ApiError> {
    let current = state.params.read().expect("param store lock").clone();
    match current {
        Some((v, p)) if v == version => {
            Ok(([(header::CONTENT_TYPE, "application/json")], p.table.to_json()).into_response())
        }
        Some((v, _)) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_params",
            format!("params version {version} is not served (current {v})"),
        )),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_params",
            "no params published yet",
        )),
    }
}

pub fn router(state: ServerState) -> Router {
    Router::new()
        .route(REQUEST_PATH, post(request_task))
        .route(RESULT_PATH, post(submit_result))
        .route(HEARTBEAT_PATH, post(heartbeat))
        .route(STATUS_PATH, get(status))
        .route(&format!("{PARAMS_PATH}/{{version}}"), get(params))
        .with_state(state)
}

/// A server running on its own thread; dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background
/// tokio runtime.
pub fn serve(addr: SocketAddr, state: ServerState) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state);
    let thread = thread::Builder::new().name("sgs-server".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    tracing::info!(%addr, "fabric server listening");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
