//! JSON bodies of the fabric's HTTP protocol and the task payloads that
//! travel inside them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::table::{Assignment, ReportOutcome, TaskId, TaskKind, TaskSpec};
use crate::domain::{self, Problem, Solution};
use crate::policy::{sample_trace, SolverParams};

pub const REQUEST_PATH: &str = "/v1/task/request";
pub const RESULT_PATH: &str = "/v1/task/result";
pub const HEARTBEAT_PATH: &str = "/v1/worker/heartbeat";
pub const STATUS_PATH: &str = "/v1/status";
/// Solver parameters by version, in the sparse parameter JSON format.
pub const PARAMS_PATH: &str = "/v1/params";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerRequest {
    pub worker_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    pub task_id: TaskId,
    pub kind: TaskKind,
    pub payload: Value,
    pub seed: u64,
    /// Tasks another worker finished first since this worker's last request.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revoked: Vec<TaskId>,
}

impl TaskResponse {
    pub fn new(assignment: Assignment, revoked: Vec<TaskId>) -> Self {
        TaskResponse {
            task_id: assignment.task_id,
            kind: assignment.kind,
            payload: assignment.payload,
            seed: assignment.seed,
            revoked,
        }
    }

    pub fn into_assignment(self) -> Assignment {
        Assignment {
            task_id: self.task_id,
            kind: self.kind,
            payload: self.payload,
            seed: self.seed,
            speculative: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSubmission {
    pub worker_id: String,
    pub task_id: TaskId,
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultAck {
    pub status: ReportOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum PayloadError {
    #[error("malformed {what} payload: {source}")]
    Malformed {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },
    #[error("task kind {0:?} cannot be executed here")]
    WrongKind(TaskKind),
}

fn parse<T: for<'de> Deserialize<'de>>(what: &'static str, value: &Value) -> Result<T, PayloadError> {
    T::deserialize(value).map_err(|source| PayloadError::Malformed { what, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPayload {
    pub problem: Problem,
    pub params_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub steps: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationPayload {
    pub problem: Problem,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// `None` when the verifier rejected the rollout as malformed.
    pub verified: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
}

impl GenerationPayload {
    pub fn from_value(value: &Value) -> Result<Self, PayloadError> {
        parse("generation", value)
    }
}

impl GenerationResult {
    pub fn from_value(value: &Value) -> Result<Self, PayloadError> {
        parse("generation result", value)
    }
}

impl VerificationResult {
    pub fn from_value(value: &Value) -> Result<Self, PayloadError> {
        parse("verification result", value)
    }
}

/// Samples one trace with the task's own seed, so any worker computing the
/// same task returns the same bytes.
pub fn run_generation(assignment: &Assignment, params: &SolverParams) -> Result<Value, PayloadError> {
    if assignment.kind != TaskKind::Generation {
        return Err(PayloadError::WrongKind(assignment.kind));
    }
    let payload = GenerationPayload::from_value(&assignment.payload)?;
    let mut rng = ChaCha8Rng::seed_from_u64(assignment.seed);
    let trace = sample_trace(params, &payload.problem, &mut rng);
    Ok(serde_json::to_value(GenerationResult {
        steps: trace.steps,
        logprobs: trace.logprobs,
        entropies: trace.entropies,
        seed: assignment.seed,
    })
    .expect("results serialize"))
}

pub fn run_verification(assignment: &Assignment) -> Result<Value, PayloadError> {
    if assignment.kind != TaskKind::Verification {
        return Err(PayloadError::WrongKind(assignment.kind));
    }
    let payload: VerificationPayload = parse("verification", &assignment.payload)?;
    let result = match domain::verify(&payload.problem, &Solution::new(payload.steps)) {
        Ok(verified) => VerificationResult {
            verified: Some(verified),
            error: None,
            seed: assignment.seed,
        },
        Err(e) => VerificationResult {
            verified: None,
            error: Some(e.to_string()),
            seed: assignment.seed,
        },
    };
    Ok(serde_json::to_value(result).expect("results serialize"))
}

pub fn verification_task_id(generation_id: &str) -> TaskId {
    format!("{generation_id}/verify")
}

/// The verification task that follows an accepted generation result.
pub fn verification_follow_up(task: &TaskSpec, result: &Value) -> Vec<TaskSpec> {
    if task.kind != TaskKind::Generation {
        return Vec::new();
    }
    let problem = task.payload.get("problem").cloned().unwrap_or(Value::Null);
    let steps = result.get("steps").cloned().unwrap_or(Value::Null);
    vec![TaskSpec {
        id: verification_task_id(&task.id),
        kind: TaskKind::Verification,
        payload: serde_json::json!({ "problem": problem, "steps": steps }),
        seed: task.seed,
    }]
}
