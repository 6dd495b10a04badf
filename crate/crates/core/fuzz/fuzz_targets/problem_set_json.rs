#![no_main]

use libfuzzer_sys::fuzz_target;
use sgs_core::domain::ProblemSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = ProblemSet::from_json(text) {
        // accepted sets survive a round trip unchanged
        let again = ProblemSet::from_json(&set.to_json()).expect("re-parse");
        assert_eq!(again.problems, set.problems);
        assert!((0.0..=1.0).contains(&set.infeasible_fraction));
    }
});
