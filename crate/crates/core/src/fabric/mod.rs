//! Server-worker rollout fabric: FIFO dispatch, heartbeat expiry with
//! requeue, speculative duplicates for stragglers, and first-result-wins
//! deduplication.

mod drain;
mod table;
pub mod wire;

pub use drain::{DrainOptions, DrainReport, Fabric, WaitOptions, WorkerScript};
pub use table::{
    Assignment, FabricError, Liveness, ReportOutcome, TableStatus, Task, TaskId, TaskKind, TaskSpec, TaskState,
    TaskTable, WorkerId, WorkerRecord, DEFAULT_HEARTBEAT_TIMEOUT_MS,
};
