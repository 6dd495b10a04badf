#![no_main]

use libfuzzer_sys::fuzz_target;
use sgs_core::policy::{ParamTable, SolverParams};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ParamTable::from_json(text) {
        assert!(table.as_slice().iter().all(|v| v.is_finite()));
        let again = ParamTable::from_json(&table.to_json()).expect("re-parse");
        assert_eq!(again, table);
        let _ = SolverParams::from_table(table);
    }
});
