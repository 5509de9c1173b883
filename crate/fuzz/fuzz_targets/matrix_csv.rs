#![no_main]

use libfuzzer_sys::fuzz_target;
use simt_core::format::{matrix_from_csv, matrix_to_csv};

fuzz_target!(|data: &str| {
    if let Ok(m) = matrix_from_csv(data) {
        let text = matrix_to_csv(&m);
        let again = matrix_from_csv(&text).expect("re-parse our own CSV");
        assert_eq!(m, again);
    }
});
