#![no_main]

use libfuzzer_sys::fuzz_target;
use sgs_core::orchestrator::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::from_json(text) {
        let again = RunConfig::from_json(&config.to_json_pretty()).expect("re-parse");
        assert_eq!(again, config);
    }
});
