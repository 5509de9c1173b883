#![no_main]

use libfuzzer_sys::fuzz_target;
use simt_core::format::{config_from_json, config_to_json};

fuzz_target!(|data: &str| {
    if let Ok(config) = config_from_json(data) {
        let again = config_from_json(&config_to_json(&config)).expect("re-parse our own config");
        assert_eq!(config, again);
    }
});
