#![no_main]

use libfuzzer_sys::fuzz_target;
use sgs_core::fabric::wire::{
    run_verification, GenerationPayload, GenerationResult, ResultSubmission, TaskResponse, VerificationResult,
    WorkerRequest,
};
use sgs_core::fabric::TaskKind;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<WorkerRequest>(data);
    let _ = serde_json::from_slice::<ResultSubmission>(data);
    let Ok(value) = serde_json::from_slice::<serde_json::Value>(data) else {
        return;
    };
    let _ = GenerationPayload::from_value(&value);
    let _ = GenerationResult::from_value(&value);
    let _ = VerificationResult::from_value(&value);
    if let Ok(task) = serde_json::from_value::<TaskResponse>(value) {
        let assignment = task.into_assignment();
        if assignment.kind == TaskKind::Verification {
            // malformed payloads must surface as errors, never panics
            let _ = run_verification(&assignment);
        }
    }
});
