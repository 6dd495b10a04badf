//! Where Solver rollouts run: on a local thread pool, or through the rollout
//! fabric (with in-process workers or remote ones).

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use super::OrchestratorError;
use crate::domain::{self, Problem, Solution};
use crate::fabric::wire::{
    run_generation, run_verification, verification_follow_up, verification_task_id, GenerationPayload,
    GenerationResult, VerificationResult,
};
use crate::fabric::{Assignment, DrainOptions, Fabric, TaskKind, TaskSpec, WaitOptions, WorkerScript};
use crate::policy::{sample_trace, SolverParams, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutJob {
    pub problem: Problem,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub trace: Trace,
    /// `None` when verification failed structurally.
    pub verified: Option<bool>,
    pub error: Option<String>,
}

/// Runs one batch of Solver rollouts and verifies them. Outcomes align with
/// `jobs`; each job's trace depends only on its seed and `params`.
pub trait RolloutExecutor {
    fn execute(
        &mut self,
        params: &SolverParams,
        params_version: u64,
        jobs: &[RolloutJob],
    ) -> Result<Vec<RolloutOutcome>, OrchestratorError>;
}

fn local_rollout(params: &SolverParams, job: &RolloutJob) -> RolloutOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let trace = sample_trace(params, &job.problem, &mut rng);
    match domain::verify(&job.problem, &Solution::new(trace.steps.clone())) {
        Ok(v) => RolloutOutcome {
            trace,
            verified: Some(v),
            error: None,
        },
        Err(e) => RolloutOutcome {
            trace,
            verified: None,
            error: Some(e.to_string()),
        },
    }
}

/// Data-parallel execution on the rayon pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcessExecutor;

impl RolloutExecutor for InProcessExecutor {
    fn execute(
        &mut self,
        params: &SolverParams,
        _params_version: u64,
        jobs: &[RolloutJob],
    ) -> Result<Vec<RolloutOutcome>, OrchestratorError> {
        Ok(jobs.par_iter().map(|job| local_rollout(params, job)).collect())
    }
}

/// Latest published Solver parameters, shared with whoever serves them.
pub type ParamStore = Arc<RwLock<Option<(u64, Arc<SolverParams>)>>>;

pub fn new_param_store() -> ParamStore {
    Arc::new(RwLock::new(None))
}

/// Runs a worker-side assignment, turning failures into an error payload.
pub fn execute_assignment(assignment: &Assignment, params: &SolverParams) -> Value {
    let result = match assignment.kind {
        TaskKind::Generation => run_generation(assignment, params),
        TaskKind::Verification => run_verification(assignment),
    };
    result.unwrap_or_else(|e| json!({ "error": e.to_string() }))
}

/// Generation tasks (each spawning a verification task) through a
/// [`Fabric`]. With an empty pool the batch waits for external workers,
/// which fetch parameters from the [`ParamStore`].
pub struct FabricExecutor {
    fabric: Arc<Fabric>,
    pool: Vec<WorkerScript>,
    drain: DrainOptions,
    store: ParamStore,
}

impl FabricExecutor {
    /// `fabric` must have been built with the verification follow-up rule.
    pub fn new(fabric: Arc<Fabric>, pool: Vec<WorkerScript>, drain: DrainOptions, store: ParamStore) -> Self {
        FabricExecutor {
            fabric,
            pool,
            drain,
            store,
        }
    }

    /// A fabric with the generation-to-verification pipeline installed.
    pub fn pipeline_fabric(heartbeat_timeout: Duration) -> Fabric {
        Fabric::new(heartbeat_timeout).with_follow_up(verification_follow_up)
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }
}

fn task_id(version: u64, index: usize) -> String {
    format!("t{version}/{index}")
}

fn outcome_from(results: &BTreeMap<String, Value>, id: &str) -> RolloutOutcome {
    let failed = |message: String| RolloutOutcome {
        trace: Trace {
            steps: Vec::new(),
            logprobs: Vec::new(),
            entropies: Vec::new(),
        },
        verified: None,
        error: Some(message),
    };
    let Some(gen) = results.get(id) else {
        return failed(format!("no generation result for {id}"));
    };
    let gen = match GenerationResult::from_value(gen) {
        Ok(g) => g,
        Err(e) => return failed(e.to_string()),
    };
    let trace = Trace {
        steps: gen.steps,
        logprobs: gen.logprobs,
        entropies: gen.entropies,
    };
    let verdict = results
        .get(&verification_task_id(id))
        .ok_or_else(|| format!("no verification result for {id}"))
        .and_then(|v| VerificationResult::from_value(v).map_err(|e| e.to_string()));
    match verdict {
        Ok(v) => RolloutOutcome {
            trace,
            verified: v.verified,
            error: v.error,
        },
        Err(message) => RolloutOutcome {
            trace,
            verified: None,
            error: Some(message),
        },
    }
}

impl RolloutExecutor for FabricExecutor {
    fn execute(
        &mut self,
        params: &SolverParams,
        params_version: u64,
        jobs: &[RolloutJob],
    ) -> Result<Vec<RolloutOutcome>, OrchestratorError> {
        *self.store.write().expect("param store lock") = Some((params_version, Arc::new(params.clone())));
        let specs: Vec<TaskSpec> = jobs
            .iter()
            .enumerate()
            .map(|(i, job)| TaskSpec {
                id: task_id(params_version, i),
                kind: TaskKind::Generation,
                payload: serde_json::to_value(GenerationPayload {
                    problem: job.problem.clone(),
                    params_version,
                })
                .expect("payloads serialize"),
                seed: job.seed,
            })
            .collect();
        let report = if self.pool.is_empty() {
            let ids = self.fabric.submit(specs)?;
            let wait = WaitOptions {
                poll_interval: self.drain.poll_interval,
                stall_timeout: None,
                deadline: self.drain.deadline,
            };
            self.fabric.wait(&ids, &wait)?
        } else {
            let execute = |a: &Assignment| execute_assignment(a, params);
            self.fabric.drain(specs, &self.pool, &execute, &self.drain)?
        };
        Ok((0..jobs.len())
            .map(|i| outcome_from(&report.results, &task_id(params_version, i)))
            .collect())
    }
}
