#![no_main]

use libfuzzer_sys::fuzz_target;
use simt_core::format::{dataset_from_jsonl, dataset_to_jsonl, header_from_json, DatasetHeader};
use simt_core::synth::GroundTruthSpec;

// The first line is the header; inputs whose first line is not a valid
// header are read against the toy spec instead.
fuzz_target!(|data: &str| {
    let (first, rest) = data.split_once('\n').unwrap_or((data, ""));
    let (header, body) = match header_from_json(first) {
        Ok(header) => (header, rest),
        Err(_) => (
            DatasetHeader {
                spec: GroundTruthSpec::toy(4.0),
                seed: 0,
                n: data.lines().count().max(1),
            },
            data,
        ),
    };
    if let Ok(ds) = dataset_from_jsonl(body, &header) {
        let again = dataset_from_jsonl(&dataset_to_jsonl(&ds), &header).expect("re-parse our own dataset");
        assert_eq!(ds, again);
    }
});
