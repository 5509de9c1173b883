//! Output formats compared against checked-in golden files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_simt");

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(path).unwrap()
}

fn run_tiny(dir: &Path) -> PathBuf {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let mut config: Value = serde_json::from_str(&fs::read_to_string(toy).unwrap()).unwrap();
    config["n"] = 300.into();
    config["heldout_n"] = 100.into();
    config["train"]["warmup_iters"] = 20.into();
    config["train"]["train_iters"] = 20.into();
    config["train"]["batch_size"] = 16.into();
    config["eval_every"] = 10.into();
    let path = dir.join("tiny.json");
    fs::write(&path, config.to_string()).unwrap();
    let cfg = path.to_str().unwrap();
    for args in [
        vec!["gen", "--config", cfg, "--out", "data"],
        vec!["train", "--config", cfg, "--data", "data/train.jsonl", "--heldout", "data/heldout.jsonl", "--out", "run"],
    ] {
        let out = Command::new(BIN)
            .args(&args)
            .current_dir(dir)
            .env("SIMT_LOG", "error")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    dir.to_path_buf()
}

/// Each CSV field is `d.dddddddddddddddde[-]x`: 17 significant digits.
fn assert_17_digit_fields(csv: &str) {
    for line in csv.lines() {
        for field in line.split(',') {
            let (mantissa, exponent) = field.split_once('e').unwrap_or_else(|| panic!("{field}"));
            let digits = mantissa.trim_start_matches('-').replace('.', "");
            assert_eq!(digits.len(), 17, "{field}");
            assert!(digits.bytes().all(|b| b.is_ascii_digit()), "{field}");
            exponent.parse::<i32>().unwrap();
        }
    }
}

#[test]
fn formats_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = run_tiny(dir.path());

    assert_eq!(fs::read_to_string(root.join("data/t_true.csv")).unwrap(), golden("toy_t_true.csv"));

    let metrics = fs::read_to_string(root.join("run/metrics.csv")).unwrap();
    let (header, rows) = metrics.split_once('\n').unwrap();
    assert_eq!(format!("{header}\n"), golden("metrics_header.csv"));
    assert_eq!(rows.lines().count(), 2);
    for row in rows.lines() {
        let (iteration, values) = row.split_once(',').unwrap();
        iteration.parse::<usize>().unwrap();
        assert_17_digit_fields(values);
    }

    let simt = fs::read_to_string(root.join("run/simt.csv")).unwrap();
    assert_eq!(simt.lines().count(), 5);
    assert_17_digit_fields(&simt);

    let checkpoint: Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/checkpoint.json")).unwrap()).unwrap();
    let keys: Vec<&str> = checkpoint.as_object().unwrap().keys().map(String::as_str).collect();
    let expected_text = golden("checkpoint_keys.txt");
    let expected: Vec<&str> = expected_text.lines().collect();
    let mut sorted_keys = keys.clone();
    let mut sorted_expected = expected.clone();
    sorted_keys.sort_unstable();
    sorted_expected.sort_unstable();
    assert_eq!(sorted_keys, sorted_expected);
    assert_eq!(checkpoint["version"], 1);
    assert_eq!(checkpoint["rng"]["seed"].as_str().unwrap().len(), 64);
}
