#![no_main]

use libfuzzer_sys::fuzz_target;
use simt_core::format::{header_from_json, header_to_json};

fuzz_target!(|data: &str| {
    if let Ok(header) = header_from_json(data) {
        let again = header_from_json(&header_to_json(&header)).expect("re-parse our own header");
        assert_eq!(header, again);
    }
});
