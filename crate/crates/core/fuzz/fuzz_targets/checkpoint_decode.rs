#![no_main]

use libfuzzer_sys::fuzz_target;
use sgs_core::orchestrator::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = decode_checkpoint(data, None) {
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&data[12..44]);
        let bytes = encode_checkpoint(&state, &hash);
        assert_eq!(decode_checkpoint(&bytes, Some(&hash)).expect("re-decode"), state);
    }
});
