//! Thread-safe fabric around the task table, plus an in-process worker pool
//! for draining batches.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::table::{Assignment, FabricError, ReportOutcome, TableStatus, TaskId, TaskSpec, TaskTable, WorkerId};

type FollowUp = dyn Fn(&TaskSpec, &Value) -> Vec<TaskSpec> + Send + Sync;

/// Shared server state: the task table, a monotonic clock and the pipeline
/// rule that turns accepted results into new tasks.
pub struct Fabric {
    table: Mutex<TaskTable>,
    changed: Condvar,
    started: Instant,
    follow_up: Option<Box<FollowUp>>,
    children: Mutex<HashMap<TaskId, Vec<TaskId>>>,
    replacements: Arc<Mutex<Vec<WorkerId>>>,
}

impl std::fmt::Debug for Fabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fabric")
            .field("status", &self.status())
            .finish_non_exhaustive()
    }
}

impl Fabric {
    pub fn new(timeout: Duration) -> Self {
        let replacements = Arc::new(Mutex::new(Vec::new()));
        let mut table = TaskTable::new(timeout.as_millis() as u64);
        let sink = replacements.clone();
        table.set_replacement_hook(move |w| sink.lock().expect("hook lock").push(w.clone()));
        Fabric {
            table: Mutex::new(table),
            changed: Condvar::new(),
            started: Instant::now(),
            follow_up: None,
            children: Mutex::new(HashMap::new()),
            replacements,
        }
    }

    /// Accepted results of a task spawn the tasks this returns.
    pub fn with_follow_up(mut self, rule: impl Fn(&TaskSpec, &Value) -> Vec<TaskSpec> + Send + Sync + 'static) -> Self {
        self.follow_up = Some(Box::new(rule));
        self
    }

    pub fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn lock(&self) -> MutexGuard<'_, TaskTable> {
        self.table.lock().expect("task table lock poisoned")
    }

    pub fn submit(&self, specs: Vec<TaskSpec>) -> Result<Vec<TaskId>, FabricError> {
        let now = self.now_ms();
        let ids = self.lock().submit(specs, now)?;
        self.changed.notify_all();
        Ok(ids)
    }

    pub fn heartbeat(&self, worker: &str) {
        let now = self.now_ms();
        self.lock().heartbeat(worker, now);
    }

    /// Next assignment plus any revocations since the worker's last request.
    pub fn next_task(&self, worker: &str) -> Result<(Option<Assignment>, Vec<TaskId>), FabricError> {
        let now = self.now_ms();
        let mut table = self.lock();
        let assignment = table.next_task(worker, now)?;
        Ok((assignment, table.take_revoked(worker)))
    }

    pub fn report(&self, worker: &str, task: &str, result: Value) -> Result<ReportOutcome, FabricError> {
        let now = self.now_ms();
        let mut table = self.lock();
        let outcome = table.report_result(worker, task, result)?;
        if outcome == ReportOutcome::Accepted {
            if let Some(rule) = &self.follow_up {
                let done = table.task(task).expect("just completed");
                let specs = rule(&done.spec, done.result.as_ref().expect("accepted"));
                if !specs.is_empty() {
                    let ids = table.submit(specs, now)?;
                    self.children
                        .lock()
                        .expect("children lock")
                        .insert(task.to_string(), ids);
                }
            }
        }
        drop(table);
        self.changed.notify_all();
        Ok(outcome)
    }

    pub fn expire(&self) -> Vec<TaskId> {
        let now = self.now_ms();
        let requeued = self.lock().expire(now);
        if !requeued.is_empty() {
            self.changed.notify_all();
        }
        requeued
    }

    /// Workers the table asked to replace since the last call.
    pub fn take_replacement_requests(&self) -> Vec<WorkerId> {
        std::mem::take(&mut *self.replacements.lock().expect("hook lock"))
    }

    pub fn status(&self) -> TableStatus {
        self.lock().status()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        self.lock().check_invariants()
    }

    /// `ids` plus every task transitively spawned from them.
    pub fn with_descendants(&self, ids: &[TaskId]) -> Vec<TaskId> {
        let _table = self.lock();
        descendants(&self.children.lock().expect("children lock"), ids)
    }

    // Lock order everywhere: table, then children.
    fn batch_complete(&self, ids: &[TaskId]) -> bool {
        let table = self.lock();
        let all = descendants(&self.children.lock().expect("children lock"), ids);
        all.iter().all(|id| table.result(id).is_some())
    }

    /// Blocks until every task in `ids` (and its follow-ups) has a result,
    /// expiring silent workers along the way.
    pub fn wait(&self, ids: &[TaskId], options: &WaitOptions) -> Result<DrainReport, FabricError> {
        self.supervise(ids, options, || {})
    }

    fn supervise(
        &self,
        ids: &[TaskId],
        options: &WaitOptions,
        mut on_tick: impl FnMut(),
    ) -> Result<DrainReport, FabricError> {
        let begun = Instant::now();
        let mut idle_since: Option<Instant> = None;
        loop {
            self.expire();
            on_tick();
            if self.batch_complete(ids) {
                return Ok(self.report_for(ids));
            }
            let (live, pending) = {
                let table = self.lock();
                (table.live_workers(), table.has_pending())
            };
            if live == 0 && pending {
                let since = *idle_since.get_or_insert_with(Instant::now);
                if options.stall_timeout.is_some_and(|t| since.elapsed() > t) {
                    return Err(FabricError::Stalled("no live workers while work is pending".into()));
                }
            } else {
                idle_since = None;
            }
            if options.deadline.is_some_and(|d| begun.elapsed() > d) {
                return Err(FabricError::Stalled(
                    "deadline passed before the batch completed".into(),
                ));
            }
            let table = self.lock();
            let _ = self
                .changed
                .wait_timeout(table, options.poll_interval)
                .expect("task table lock poisoned");
        }
    }

    fn report_for(&self, ids: &[TaskId]) -> DrainReport {
        let table = self.lock();
        let all = descendants(&self.children.lock().expect("children lock"), ids);
        let results = all
            .iter()
            .map(|id| (id.clone(), table.result(id).cloned().expect("batch complete")))
            .collect();
        let wanted: std::collections::HashSet<&TaskId> = all.iter().collect();
        let accepted = table
            .result_log()
            .iter()
            .filter(|(t, _)| wanted.contains(t))
            .cloned()
            .collect();
        DrainReport {
            results,
            accepted,
            status: table.status(),
        }
    }

    /// Submits `tasks`, runs them (and their follow-ups) on an in-process
    /// worker pool, and returns one result per task id.
    ///
    /// Workers that die are detected through missed heartbeats; their tasks
    /// are requeued and a replacement worker with a clean script is started.
    pub fn drain<F>(
        &self,
        tasks: Vec<TaskSpec>,
        pool: &[WorkerScript],
        execute: &F,
        options: &DrainOptions,
    ) -> Result<DrainReport, FabricError>
    where
        F: Fn(&Assignment) -> Value + Sync,
    {
        if pool.is_empty() {
            return Err(FabricError::Stalled("drain needs at least one worker".into()));
        }
        let ids = self.submit(tasks)?;
        let stop = AtomicBool::new(false);
        let replacement_script = WorkerScript::default();
        thread::scope(|scope| {
            for (i, script) in pool.iter().enumerate() {
                let name = format!("w{i}");
                let stop = &stop;
                scope.spawn(move || run_worker(self, &name, script, execute, options, stop));
            }
            let mut replacements = 0usize;
            let wait = WaitOptions {
                poll_interval: options.poll_interval,
                stall_timeout: options.stall_timeout,
                deadline: options.deadline,
            };
            let result = self.supervise(&ids, &wait, || {
                for dead in self.take_replacement_requests() {
                    if replacements >= options.max_replacements {
                        continue;
                    }
                    replacements += 1;
                    let name = format!("{dead}+r{replacements}");
                    let (stop, script) = (&stop, &replacement_script);
                    scope.spawn(move || run_worker(self, &name, script, execute, options, stop));
                }
            });
            stop.store(true, Ordering::SeqCst);
            self.changed.notify_all();
            result
        })
    }
}

fn descendants(children: &HashMap<TaskId, Vec<TaskId>>, ids: &[TaskId]) -> Vec<TaskId> {
    let mut out = Vec::new();
    let mut stack: Vec<TaskId> = ids.iter().rev().cloned().collect();
    while let Some(id) = stack.pop() {
        if let Some(kids) = children.get(&id) {
            stack.extend(kids.iter().rev().cloned());
        }
        out.push(id);
    }
    out
}

/// Scripted behavior for an in-process worker (fault injection).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkerScript {
    /// Completes this many tasks, then takes one more and vanishes with it.
    pub die_after: Option<usize>,
    /// Extra latency per task.
    pub delay: Duration,
    /// Reports every result twice.
    pub duplicate_reports: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct WaitOptions {
    pub poll_interval: Duration,
    pub stall_timeout: Option<Duration>,
    pub deadline: Option<Duration>,
}

impl Default for WaitOptions {
    fn default() -> Self {
        WaitOptions {
            poll_interval: Duration::from_millis(5),
            stall_timeout: None,
            deadline: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DrainOptions {
    pub poll_interval: Duration,
    pub stall_timeout: Option<Duration>,
    pub deadline: Option<Duration>,
    pub max_replacements: usize,
}

impl Default for DrainOptions {
    fn default() -> Self {
        DrainOptions {
            poll_interval: Duration::from_millis(2),
            stall_timeout: Some(Duration::from_secs(60)),
            deadline: None,
            max_replacements: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrainReport {
    /// One result per task id, follow-ups included.
    pub results: BTreeMap<TaskId, Value>,
    /// Accepted results in acceptance order.
    pub accepted: Vec<(TaskId, WorkerId)>,
    pub status: TableStatus,
}

fn run_worker<F>(
    fabric: &Fabric,
    name: &str,
    script: &WorkerScript,
    execute: &F,
    options: &DrainOptions,
    stop: &AtomicBool,
) where
    F: Fn(&Assignment) -> Value + Sync,
{
    let mut completed = 0usize;
    while !stop.load(Ordering::SeqCst) {
        fabric.heartbeat(name);
        let assignment = match fabric.next_task(name) {
            Ok((Some(a), _revoked)) => a,
            Ok((None, _)) => {
                thread::sleep(options.poll_interval);
                continue;
            }
            Err(_) => return,
        };
        if script.die_after == Some(completed) {
            // Vanish holding the task: no report, no further heartbeats.
            return;
        }
        if !script.delay.is_zero() {
            thread::sleep(script.delay);
        }
        let result = execute(&assignment);
        let reports = if script.duplicate_reports { 2 } else { 1 };
        for _ in 0..reports {
            if fabric.report(name, &assignment.task_id, result.clone()).is_err() {
                return;
            }
        }
        completed += 1;
    }
}
