//! JSON-over-HTTP transport for the rollout fabric: an axum server wrapping
//! a shared [`Fabric`](sgs_core::fabric::Fabric), and a blocking worker that
//! polls it.

mod server;
mod worker;

pub use server::{router, serve, ServerHandle, ServerState};
pub use worker::{run_worker, NetError, WorkerClient, WorkerOptions, WorkerSummary};
