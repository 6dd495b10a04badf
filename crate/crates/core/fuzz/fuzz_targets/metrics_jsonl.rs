#![no_main]

use libfuzzer_sys::fuzz_target;
use sgs_core::orchestrator::parse_metrics;
use sgs_core::scaling::{curve_from_metrics, fit};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_metrics(text, "fuzz");
    if let Ok(points) = curve_from_metrics(text) {
        assert!(points.windows(2).all(|w| w[0].generations < w[1].generations));
        if points.len() <= 64 {
            let _ = fit(&points, 0, false);
        }
    }
});
