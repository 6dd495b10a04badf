use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::json;
use sgs_core::domain::{generate_dataset, DatasetConfig};
use sgs_core::fabric::{DrainOptions, ReportOutcome, TaskKind, TaskSpec};
use sgs_core::orchestrator::{
    new_param_store, run_iteration, DatasetRef, FabricExecutor, InProcessExecutor, Mode, RunConfig, RunState,
};
use sgs_net::{run_worker, serve, NetError, ServerState, WorkerClient, WorkerOptions};

fn start() -> (sgs_net::ServerHandle, ServerState) {
    let fabric = Arc::new(FabricExecutor::pipeline_fabric(Duration::from_secs(5)));
    let state = ServerState {
        fabric,
        params: new_param_store(),
    };
    let handle = serve("127.0.0.1:0".parse().unwrap(), state.clone()).unwrap();
    (handle, state)
}

fn client(handle: &sgs_net::ServerHandle, id: &str) -> WorkerClient {
    WorkerClient::new(&handle.addr().to_string(), id, Duration::from_secs(10)).unwrap()
}

#[test]
fn remote_workers_match_in_process_run() {
    let data = DatasetConfig {
        size: 12,
        modulus: (5, 9),
        budget: (3, 5),
        op_count: (2, 3),
        seed: 4,
        ..DatasetConfig::default()
    };
    let set = generate_dataset(&data).unwrap();
    let mut config = RunConfig::new(Mode::Sgs, DatasetRef::Generate(data), 3, 8);
    config.solver_hash_bits = 8;
    config.conjecturer_hash_bits = 6;

    let mut local = RunState::new(&config);
    let expected: Vec<_> = (0..3)
        .map(|_| {
            run_iteration(&mut local, &config, &set, &mut InProcessExecutor)
                .unwrap()
                .metrics
        })
        .collect();

    let (handle, state) = start();
    let options = WorkerOptions::default();
    let workers: Vec<_> = (0..3)
        .map(|i| {
            let c = client(&handle, &format!("remote{i}"));
            let o = options.clone();
            thread::spawn(move || run_worker(&c, &o))
        })
        .collect();
    let mut executor = FabricExecutor::new(
        state.fabric.clone(),
        Vec::new(),
        DrainOptions {
            deadline: Some(Duration::from_secs(60)),
            ..DrainOptions::default()
        },
        state.params.clone(),
    );
    let mut remote = RunState::new(&config);
    let got: Vec<_> = (0..3)
        .map(|_| {
            run_iteration(&mut remote, &config, &set, &mut executor)
                .unwrap()
                .metrics
        })
        .collect();
    options.stop.store(true, Ordering::SeqCst);
    let mut accepted = 0;
    for w in workers {
        accepted += w.join().unwrap().unwrap().accepted;
    }
    assert_eq!(got, expected);
    assert_eq!(remote, local);
    let status = client(&handle, "probe").status().unwrap();
    assert_eq!(status.complete, accepted);
    assert_eq!(status.pending + status.in_progress, 0);
    state.fabric.check_invariants().unwrap();
    handle.shutdown().unwrap();
}

#[test]
fn protocol_errors_and_duplicates() {
    let (handle, state) = start();
    let a = client(&handle, "a");
    let b = client(&handle, "b");

    let err = a.request().unwrap_err();
    assert!(matches!(err, NetError::Server { status: 404, ref code, .. } if code == "unknown_worker"));

    a.heartbeat().unwrap();
    b.heartbeat().unwrap();
    assert!(a.request().unwrap().is_none());

    state
        .fabric
        .submit(vec![TaskSpec {
            id: "x".into(),
            kind: TaskKind::Verification,
            payload: json!({}),
            seed: 3,
        }])
        .unwrap();
    let err = b.submit("x", json!(1)).unwrap_err();
    assert!(matches!(err, NetError::Server { status: 409, ref code, .. } if code == "protocol_error"));

    let task = a.request().unwrap().unwrap();
    assert_eq!((task.task_id.as_str(), task.seed), ("x", 3));
    let dup = b.request().unwrap().unwrap();
    assert_eq!(dup.task_id, "x");
    assert_eq!(a.submit("x", json!({"v": 1})).unwrap(), ReportOutcome::Accepted);
    assert_eq!(b.submit("x", json!({"v": 2})).unwrap(), ReportOutcome::DuplicateDropped);

    let err = a.submit("nope", json!(null)).unwrap_err();
    assert!(matches!(err, NetError::Server { status: 404, ref code, .. } if code == "unknown_task"));
    let err = a.params(0).unwrap_err();
    assert!(matches!(err, NetError::Server { status: 404, ref code, .. } if code == "unknown_params"));

    let status = a.status().unwrap();
    assert_eq!((status.complete, status.duplicates_dropped), (1, 1));

    let raw = reqwest::blocking::Client::new()
        .post(format!("http://{}/v1/task/request", handle.addr()))
        .header("content-type", "application/json")
        .body("{\"worker\":")
        .send()
        .unwrap();
    assert_eq!(raw.status().as_u16(), 400);
    let body: serde_json::Value = raw.json().unwrap();
    assert_eq!(body["error"], "bad_request");
}
