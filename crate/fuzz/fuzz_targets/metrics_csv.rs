#![no_main]

use libfuzzer_sys::fuzz_target;
use simt_core::format::{metrics_from_csv, metrics_to_csv};

fuzz_target!(|data: &str| {
    if let Ok(records) = metrics_from_csv(data) {
        let again = metrics_from_csv(&metrics_to_csv(&records)).expect("re-parse our own metrics");
        assert_eq!(records, again);
    }
});
