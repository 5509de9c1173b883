#![no_main]

use libfuzzer_sys::fuzz_target;
use simt_core::format::{checkpoint_from_json, checkpoint_to_json};

fuzz_target!(|data: &str| {
    if let Ok(state) = checkpoint_from_json(data) {
        let text = checkpoint_to_json(&state);
        let again = checkpoint_from_json(&text).expect("re-parse our own checkpoint");
        assert_eq!(text, checkpoint_to_json(&again));
    }
});
