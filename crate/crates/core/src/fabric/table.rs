//! The server's task table.
//!
//! Every mutation goes through `&mut self`, so callers serialize access
//! (the networked server and the in-process drain both hold it behind one
//! mutex). Timestamps are caller-supplied milliseconds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type TaskId = String;
pub type WorkerId = String;

pub const DEFAULT_HEARTBEAT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("duplicate task id {0}")]
    DuplicateTask(TaskId),
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error("worker {0} is marked dead")]
    DeadWorker(WorkerId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("worker {worker} reported {task}, which it was never assigned")]
    NotAssigned { worker: WorkerId, task: TaskId },
    #[error("drain stalled: {0}")]
    Stalled(String),
}

impl FabricError {
    /// Stable machine-readable code for wire errors.
    pub fn code(&self) -> &'static str {
        match self {
            FabricError::DuplicateTask(_) => "duplicate_task",
            FabricError::UnknownWorker(_) => "unknown_worker",
            FabricError::DeadWorker(_) => "dead_worker",
            FabricError::UnknownTask(_) => "unknown_task",
            FabricError::NotAssigned { .. } => "protocol_error",
            FabricError::Stalled(_) => "stalled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "gen")]
    Generation,
    #[serde(rename = "verify")]
    Verification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Pending,
    InProgress,
    Complete,
}

/// What a caller submits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub kind: TaskKind,
    pub payload: Value,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub state: TaskState,
    pub assignees: BTreeSet<WorkerId>,
    /// Every worker that has ever held the task.
    pub ever_assigned: BTreeSet<WorkerId>,
    pub enqueued_at: u64,
    order: u64,
    pub result: Option<Value>,
    pub result_from: Option<WorkerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Liveness {
    Alive,
    Dead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRecord {
    pub id: WorkerId,
    pub last_heartbeat: u64,
    pub assigned: BTreeSet<TaskId>,
    pub liveness: Liveness,
    /// Tasks taken away from this worker since its last request.
    revoked: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: TaskId,
    pub kind: TaskKind,
    pub payload: Value,
    pub seed: u64,
    pub speculative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportOutcome {
    Accepted,
    #[serde(rename = "duplicate")]
    DuplicateDropped,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableStatus {
    pub pending: usize,
    pub in_progress: usize,
    pub complete: usize,
    pub workers_alive: usize,
    pub workers_dead: usize,
    pub duplicates_dropped: usize,
    pub speculative_assignments: usize,
    pub requeued: usize,
}

type ReplacementHook = Box<dyn FnMut(&WorkerId) + Send>;

pub struct TaskTable {
    tasks: HashMap<TaskId, Task>,
    pending: BTreeMap<u64, TaskId>,
    in_progress: BTreeMap<u64, TaskId>,
    workers: BTreeMap<WorkerId, WorkerRecord>,
    timeout_ms: u64,
    next_order: u64,
    complete: usize,
    /// Accepted results in acceptance order: `(task, worker)`.
    result_log: Vec<(TaskId, WorkerId)>,
    duplicates_dropped: usize,
    speculative_assignments: usize,
    requeued: usize,
    replacement_hook: Option<ReplacementHook>,
}

impl std::fmt::Debug for TaskTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskTable")
            .field("status", &self.status())
            .finish_non_exhaustive()
    }
}

impl Default for TaskTable {
    fn default() -> Self {
        TaskTable::new(DEFAULT_HEARTBEAT_TIMEOUT_MS)
    }
}

impl TaskTable {
    pub fn new(timeout_ms: u64) -> Self {
        TaskTable {
            tasks: HashMap::new(),
            pending: BTreeMap::new(),
            in_progress: BTreeMap::new(),
            workers: BTreeMap::new(),
            timeout_ms,
            next_order: 0,
            complete: 0,
            result_log: Vec::new(),
            duplicates_dropped: 0,
            speculative_assignments: 0,
            requeued: 0,
            replacement_hook: None,
        }
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms
    }

    /// Called once per expired worker while pending work remains.
    pub fn set_replacement_hook(&mut self, hook: impl FnMut(&WorkerId) + Send + 'static) {
        self.replacement_hook = Some(Box::new(hook));
    }

    /// Enqueues tasks in order. Rejects the whole batch on any duplicate id.
    pub fn submit(&mut self, specs: Vec<TaskSpec>, now: u64) -> Result<Vec<TaskId>, FabricError> {
        let mut batch = BTreeSet::new();
        for spec in &specs {
            if self.tasks.contains_key(&spec.id) || !batch.insert(spec.id.as_str()) {
                return Err(FabricError::DuplicateTask(spec.id.clone()));
            }
        }
        let mut ids = Vec::with_capacity(specs.len());
        for spec in specs {
            let order = self.next_order;
            self.next_order += 1;
            ids.push(spec.id.clone());
            self.pending.insert(order, spec.id.clone());
            self.tasks.insert(
                spec.id.clone(),
                Task {
                    spec,
                    state: TaskState::Pending,
                    assignees: BTreeSet::new(),
                    ever_assigned: BTreeSet::new(),
                    enqueued_at: now,
                    order,
                    result: None,
                    result_from: None,
                },
            );
        }
        Ok(ids)
    }

    /// Registers or refreshes a worker. A dead worker that heartbeats again
    /// comes back with no assignments.
    pub fn heartbeat(&mut self, worker: &str, now: u64) {
        let record = self.workers.entry(worker.to_string()).or_insert_with(|| WorkerRecord {
            id: worker.to_string(),
            last_heartbeat: now,
            assigned: BTreeSet::new(),
            liveness: Liveness::Alive,
            revoked: Vec::new(),
        });
        record.last_heartbeat = record.last_heartbeat.max(now);
        record.liveness = Liveness::Alive;
    }

    fn live_worker(&mut self, worker: &str) -> Result<&mut WorkerRecord, FabricError> {
        match self.workers.get_mut(worker) {
            None => Err(FabricError::UnknownWorker(worker.to_string())),
            Some(r) if r.liveness == Liveness::Dead => Err(FabricError::DeadWorker(worker.to_string())),
            Some(r) => Ok(r),
        }
    }

    /// Oldest pending task, else a speculative copy of the in-progress task
    /// with the fewest assignees (oldest first) that this worker lacks.
    pub fn next_task(&mut self, worker: &str, now: u64) -> Result<Option<Assignment>, FabricError> {
        let record = self.live_worker(worker)?;
        record.last_heartbeat = record.last_heartbeat.max(now);

        let (order, speculative) = if let Some((&order, _)) = self.pending.iter().next() {
            (order, false)
        } else {
            let candidate = self
                .in_progress
                .iter()
                .map(|(&order, id)| (order, &self.tasks[id]))
                .filter(|(_, task)| !task.assignees.contains(worker))
                .min_by_key(|(order, task)| (task.assignees.len(), *order));
            match candidate {
                Some((order, _)) => (order, true),
                None => return Ok(None),
            }
        };

        let id = if speculative {
            self.speculative_assignments += 1;
            self.in_progress[&order].clone()
        } else {
            let id = self.pending.remove(&order).expect("order came from pending");
            self.in_progress.insert(order, id.clone());
            id
        };
        let task = self.tasks.get_mut(&id).expect("queued ids exist");
        task.state = TaskState::InProgress;
        task.assignees.insert(worker.to_string());
        task.ever_assigned.insert(worker.to_string());
        self.workers
            .get_mut(worker)
            .expect("checked live")
            .assigned
            .insert(id.clone());
        Ok(Some(Assignment {
            task_id: id,
            kind: task.spec.kind,
            payload: task.spec.payload.clone(),
            seed: task.spec.seed,
            speculative,
        }))
    }

    /// First result wins; later results for the same task are dropped.
    pub fn report_result(&mut self, worker: &str, task_id: &str, result: Value) -> Result<ReportOutcome, FabricError> {
        let task = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| FabricError::UnknownTask(task_id.to_string()))?;
        if task.state == TaskState::Complete {
            self.duplicates_dropped += 1;
            if let Some(record) = self.workers.get_mut(worker) {
                record.assigned.remove(task_id);
            }
            return Ok(ReportOutcome::DuplicateDropped);
        }
        if !task.ever_assigned.contains(worker) {
            return Err(FabricError::NotAssigned {
                worker: worker.to_string(),
                task: task_id.to_string(),
            });
        }
        match task.state {
            TaskState::Pending => self.pending.remove(&task.order),
            _ => self.in_progress.remove(&task.order),
        };
        task.state = TaskState::Complete;
        task.result = Some(result);
        task.result_from = Some(worker.to_string());
        let others = std::mem::take(&mut task.assignees);
        for other in others {
            if let Some(record) = self.workers.get_mut(&other) {
                record.assigned.remove(task_id);
                if other != worker {
                    record.revoked.push(task_id.to_string());
                }
            }
        }
        if let Some(record) = self.workers.get_mut(worker) {
            record.assigned.remove(task_id);
        }
        self.complete += 1;
        self.result_log.push((task_id.to_string(), worker.to_string()));
        Ok(ReportOutcome::Accepted)
    }

    /// Revocations since the worker's last call.
    pub fn take_revoked(&mut self, worker: &str) -> Vec<TaskId> {
        self.workers
            .get_mut(worker)
            .map(|r| std::mem::take(&mut r.revoked))
            .unwrap_or_default()
    }

    /// Marks workers silent for longer than the timeout dead and returns
    /// tasks that lost their last assignee to the pending queue.
    pub fn expire(&mut self, now: u64) -> Vec<TaskId> {
        let timeout = self.timeout_ms;
        let expired: Vec<WorkerId> = self
            .workers
            .values()
            .filter(|w| w.liveness == Liveness::Alive && now.saturating_sub(w.last_heartbeat) > timeout)
            .map(|w| w.id.clone())
            .collect();
        let mut requeued = Vec::new();
        for worker in &expired {
            let record = self.workers.get_mut(worker).expect("listed above");
            record.liveness = Liveness::Dead;
            record.revoked.clear();
            let held = std::mem::take(&mut record.assigned);
            for id in held {
                let task = self.tasks.get_mut(&id).expect("assigned tasks exist");
                task.assignees.remove(worker);
                if task.state == TaskState::InProgress && task.assignees.is_empty() {
                    task.state = TaskState::Pending;
                    self.in_progress.remove(&task.order);
                    self.pending.insert(task.order, id.clone());
                    requeued.push(id);
                }
            }
        }
        self.requeued += requeued.len();
        if !self.pending.is_empty() {
            if let Some(hook) = self.replacement_hook.as_mut() {
                expired.iter().for_each(hook);
            }
        }
        requeued
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.get(id)
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerRecord> {
        self.workers.get(id)
    }

    pub fn result(&self, id: &str) -> Option<&Value> {
        self.tasks.get(id).and_then(|t| t.result.as_ref())
    }

    pub fn result_log(&self) -> &[(TaskId, WorkerId)] {
        &self.result_log
    }

    pub fn all_complete(&self) -> bool {
        self.pending.is_empty() && self.in_progress.is_empty()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn live_workers(&self) -> usize {
        self.workers.values().filter(|w| w.liveness == Liveness::Alive).count()
    }

    pub fn status(&self) -> TableStatus {
        TableStatus {
            pending: self.pending.len(),
            in_progress: self.in_progress.len(),
            complete: self.complete,
            workers_alive: self.live_workers(),
            workers_dead: self.workers.len() - self.live_workers(),
            duplicates_dropped: self.duplicates_dropped,
            speculative_assignments: self.speculative_assignments,
            requeued: self.requeued,
        }
    }

    /// Every task is in exactly one queue matching its state.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut complete = 0;
        for task in self.tasks.values() {
            let in_pending = self.pending.get(&task.order) == Some(&task.spec.id);
            let in_progress = self.in_progress.get(&task.order) == Some(&task.spec.id);
            let ok = match task.state {
                TaskState::Pending => in_pending && !in_progress && task.assignees.is_empty(),
                TaskState::InProgress => in_progress && !in_pending && !task.assignees.is_empty(),
                TaskState::Complete => {
                    complete += 1;
                    !in_pending && !in_progress && task.assignees.is_empty() && task.result.is_some()
                }
            };
            if !ok {
                return Err(format!("task {} inconsistent in state {:?}", task.spec.id, task.state));
            }
        }
        if self.pending.len() + self.in_progress.len() + complete != self.tasks.len() {
            return Err("queue sizes do not add up".into());
        }
        for worker in self.workers.values() {
            if worker.liveness == Liveness::Dead && !worker.assigned.is_empty() {
                return Err(format!("dead worker {} holds tasks", worker.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn spec(id: &str) -> TaskSpec {
        TaskSpec {
            id: id.into(),
            kind: TaskKind::Generation,
            payload: json!({ "n": id }),
            seed: 0,
        }
    }

    fn table(ids: &[&str]) -> TaskTable {
        let mut t = TaskTable::new(30_000);
        t.submit(ids.iter().map(|i| spec(i)).collect(), 0).unwrap();
        t
    }

    #[test]
    fn submit_counts_and_duplicates() {
        let mut t = TaskTable::default();
        let ids: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
        t.submit(ids.iter().map(|i| spec(i)).collect(), 0).unwrap();
        assert_eq!(t.status().pending, 100);
        assert!(t.submit(vec![], 0).unwrap().is_empty());
        let err = t.submit(vec![spec("new"), spec("t3")], 0).unwrap_err();
        assert_eq!(err, FabricError::DuplicateTask("t3".into()));
        assert_eq!(t.status().pending, 100);
        assert!(t.task("new").is_none());
    }

    #[test]
    fn fifo_then_speculation() {
        let mut t = table(&["T1", "T2"]);
        for w in ["a", "b", "c"] {
            t.heartbeat(w, 0);
        }
        assert_eq!(t.next_task("a", 1).unwrap().unwrap().task_id, "T1");
        assert_eq!(t.next_task("b", 1).unwrap().unwrap().task_id, "T2");
        // both hold one worker; the older task wins the tie
        t.heartbeat("d", 1);
        let dup = t.next_task("d", 1).unwrap().unwrap();
        assert_eq!((dup.task_id.as_str(), dup.speculative), ("T1", true));
        let next = t.next_task("c", 1).unwrap().unwrap();
        assert_eq!(next.task_id, "T2");
        t.check_invariants().unwrap();
    }

    #[test]
    fn speculation_prefers_fewest_holders() {
        let mut t = table(&["T1", "T2"]);
        for w in ["a", "b", "c", "d"] {
            t.heartbeat(w, 0);
        }
        t.next_task("a", 0).unwrap();
        t.next_task("b", 0).unwrap();
        // T1 now has 1 holder and T2 2
        t.next_task("c", 0).unwrap();
        assert_eq!(t.task("T1").unwrap().assignees.len(), 2);
        let got = t.next_task("d", 0).unwrap().unwrap();
        assert_eq!(got.task_id, "T2");
    }

    #[test]
    fn idle_when_done_or_already_holding() {
        let mut t = table(&["T1"]);
        t.heartbeat("a", 0);
        t.next_task("a", 0).unwrap();
        assert!(t.next_task("a", 0).unwrap().is_none());
        t.report_result("a", "T1", json!(1)).unwrap();
        assert!(t.next_task("a", 0).unwrap().is_none());
        assert!(t.all_complete());
    }

    #[test]
    fn unknown_worker_rejected() {
        let mut t = table(&["T1"]);
        assert_eq!(
            t.next_task("ghost", 0).unwrap_err(),
            FabricError::UnknownWorker("ghost".into())
        );
    }

    #[test]
    fn first_result_wins() {
        let mut t = table(&["T1"]);
        t.heartbeat("a", 0);
        t.heartbeat("b", 0);
        t.next_task("a", 0).unwrap();
        t.next_task("b", 0).unwrap();
        assert_eq!(
            t.report_result("b", "T1", json!("fast")).unwrap(),
            ReportOutcome::Accepted
        );
        assert_eq!(t.take_revoked("a"), vec!["T1".to_string()]);
        assert_eq!(
            t.report_result("a", "T1", json!("slow")).unwrap(),
            ReportOutcome::DuplicateDropped
        );
        assert_eq!(t.result("T1"), Some(&json!("fast")));
        assert_eq!(t.result_log().len(), 1);
        t.check_invariants().unwrap();
    }

    #[test]
    fn report_errors() {
        let mut t = table(&["T1"]);
        t.heartbeat("a", 0);
        assert!(matches!(
            t.report_result("a", "nope", json!(0)),
            Err(FabricError::UnknownTask(_))
        ));
        assert!(matches!(
            t.report_result("a", "T1", json!(0)),
            Err(FabricError::NotAssigned { .. })
        ));
    }

    #[test]
    fn expire_requeues_sole_holder() {
        let mut t = table(&["T3", "T4"]);
        t.heartbeat("dead", 0);
        t.heartbeat("live", 0);
        t.next_task("dead", 0).unwrap();
        t.next_task("live", 0).unwrap();
        t.next_task("dead", 0).unwrap(); // speculative copy of T4
        t.heartbeat("live", 30_000);
        assert!(t.expire(30_000).is_empty(), "exactly 30 s is not past the timeout");
        let requeued = t.expire(31_000);
        assert_eq!(requeued, vec!["T3".to_string()]);
        assert_eq!(t.task("T3").unwrap().state, TaskState::Pending);
        assert_eq!(t.task("T4").unwrap().state, TaskState::InProgress);
        assert_eq!(t.worker("dead").unwrap().liveness, Liveness::Dead);
        assert!(matches!(t.next_task("dead", 31_000), Err(FabricError::DeadWorker(_))));
        t.check_invariants().unwrap();
    }

    #[test]
    fn expire_noop_when_alive() {
        let mut t = table(&["T1"]);
        t.heartbeat("a", 0);
        t.next_task("a", 0).unwrap();
        t.heartbeat("a", 20_000);
        assert!(t.expire(40_000).is_empty());
    }

    #[test]
    fn late_result_from_expired_worker_counts() {
        let mut t = table(&["T1"]);
        t.heartbeat("a", 0);
        t.next_task("a", 0).unwrap();
        t.expire(40_000);
        assert_eq!(t.task("T1").unwrap().state, TaskState::Pending);
        assert_eq!(t.report_result("a", "T1", json!(7)).unwrap(), ReportOutcome::Accepted);
        t.check_invariants().unwrap();
    }

    #[test]
    fn replacement_hook_fires_with_work_left() {
        use std::sync::{Arc, Mutex};
        let fired = Arc::new(Mutex::new(Vec::new()));
        let mut t = table(&["T1", "T2"]);
        let sink = fired.clone();
        t.set_replacement_hook(move |w| sink.lock().unwrap().push(w.clone()));
        t.heartbeat("a", 0);
        t.next_task("a", 0).unwrap();
        t.expire(31_000);
        assert_eq!(*fired.lock().unwrap(), vec!["a".to_string()]);
    }
}
