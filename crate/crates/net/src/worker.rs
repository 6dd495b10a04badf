use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};
use sgs_core::fabric::wire::{
    run_generation, run_verification, ErrorBody, GenerationPayload, ResultAck, ResultSubmission, TaskResponse,
    WorkerRequest, HEARTBEAT_PATH, PARAMS_PATH, REQUEST_PATH, RESULT_PATH, STATUS_PATH,
};
use sgs_core::fabric::{ReportOutcome, TableStatus, TaskKind};
use sgs_core::policy::{ParamTable, SolverParams};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {code}: {message}")]
    Server { status: u16, code: String, message: String },
    #[error("bad params from server: {0}")]
    Params(String),
}

impl NetError {
    fn code(&self) -> Option<&str> {
        match self {
            NetError::Server { code, .. } => Some(code),
            _ => None,
        }
    }
}

/// Blocking client for one worker identity.
#[derive(Debug, Clone)]
pub struct WorkerClient {
    http: Client,
    base: String,
    worker_id: String,
}

impl WorkerClient {
    /// `addr` is `host:port` or a full `http://` base URL.
    pub fn new(addr: &str, worker_id: &str, timeout: Duration) -> Result<Self, NetError> {
        let base = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        Ok(WorkerClient {
            http: Client::builder().timeout(timeout).build()?,
            base,
            worker_id: worker_id.to_string(),
        })
    }

    pub fn worker_id(&self) -> &str {
        &self.worker_id
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn me(&self) -> WorkerRequest {
        WorkerRequest {
            worker_id: self.worker_id.clone(),
        }
    }

    pub fn heartbeat(&self) -> Result<(), NetError> {
        check(self.http.post(self.url(HEARTBEAT_PATH)).json(&self.me()).send()?)?;
        Ok(())
    }

    /// `None` when the server has no work.
    pub fn request(&self) -> Result<Option<TaskResponse>, NetError> {
        let resp = check(self.http.post(self.url(REQUEST_PATH)).json(&self.me()).send()?)?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Ok(Some(resp.json()?))
    }

    pub fn submit(&self, task_id: &str, payload: Value) -> Result<ReportOutcome, NetError> {
        let body = ResultSubmission {
            worker_id: self.worker_id.clone(),
            task_id: task_id.to_string(),
            payload,
        };
        let ack: ResultAck = check(self.http.post(self.url(RESULT_PATH)).json(&body).send()?)?.json()?;
        Ok(ack.status)
    }

    pub fn status(&self) -> Result<TableStatus, NetError> {
        Ok(check(self.http.get(self.url(STATUS_PATH)).send()?)?.json()?)
    }

    pub fn params(&self, version: u64) -> Result<SolverParams, NetError> {
        let text = check(self.http.get(self.url(&format!("{PARAMS_PATH}/{version}"))).send()?)?.text()?;
        let table = ParamTable::from_json(&text).map_err(|e| NetError::Params(e.to_string()))?;
        SolverParams::from_table(table).map_err(|e| NetError::Params(e.to_string()))
    }
}

fn check(resp: Response) -> Result<Response, NetError> {
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status().as_u16();
    let text = resp.text().unwrap_or_default();
    let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
        Ok(body) => (body.error, body.message),
        Err(_) => ("http_error".to_string(), text),
    };
    Err(NetError::Server { status, code, message })
}

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub poll_interval: Duration,
    /// Exit after this many reported results.
    pub max_tasks: Option<usize>,
    /// Exit after this long without work.
    pub idle_limit: Option<Duration>,
    pub stop: Arc<AtomicBool>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            poll_interval: Duration::from_millis(20),
            max_tasks: None,
            idle_limit: None,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerSummary {
    pub accepted: usize,
    pub duplicates: usize,
}

/// Heartbeat, request, execute, report; repeated until an exit condition.
/// Solver parameters are fetched once per version.
pub fn run_worker(client: &WorkerClient, options: &WorkerOptions) -> Result<WorkerSummary, NetError> {
    let mut summary = WorkerSummary::default();
    let mut cached: Option<(u64, SolverParams)> = None;
    let mut idle_since = Instant::now();
    while !options.stop.load(Ordering::SeqCst) {
        if options
            .max_tasks
            .is_some_and(|m| summary.accepted + summary.duplicates >= m)
        {
            break;
        }
        client.heartbeat()?;
        let task = match client.request() {
            Ok(t) => t,
            // expired while idle; the next heartbeat revives us
            Err(e) if matches!(e.code(), Some("dead_worker" | "unknown_worker")) => continue,
            Err(e) => return Err(e),
        };
        let Some(task) = task else {
            if options.idle_limit.is_some_and(|l| idle_since.elapsed() > l) {
                break;
            }
            thread::sleep(options.poll_interval);
            continue;
        };
        idle_since = Instant::now();
        let assignment = task.into_assignment();
        let result = match assignment.kind {
            TaskKind::Generation => {
                let version = GenerationPayload::from_value(&assignment.payload).map(|p| p.params_version);
                match version {
                    Ok(v) => {
                        if cached.as_ref().map(|(cv, _)| *cv) != Some(v) {
                            cached = client.params(v).ok().map(|p| (v, p));
                        }
                        match &cached {
                            Some((_, params)) => run_generation(&assignment, params),
                            None => Ok(json!({ "error": format!("params version {v} unavailable") })),
                        }
                    }
                    Err(e) => Err(e),
                }
            }
            TaskKind::Verification => run_verification(&assignment),
        }
        .unwrap_or_else(|e| json!({ "error": e.to_string() }));
        match client.submit(&assignment.task_id, result)? {
            ReportOutcome::Accepted => summary.accepted += 1,
            ReportOutcome::DuplicateDropped => summary.duplicates += 1,
        }
        tracing::debug!(worker = client.worker_id(), task = %assignment.task_id, "reported");
    }
    Ok(summary)
}
