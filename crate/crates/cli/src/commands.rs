use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use log::{info, warn};
use simt_core::format::{
    checkpoint_from_json, checkpoint_to_json, config_from_json, dataset_from_jsonl, dataset_header,
    dataset_to_jsonl, header_from_json, header_path, header_to_json, matrix_to_csv, metrics_from_csv,
    metrics_header, metrics_row, ExperimentConfig, FormatError,
};
use simt_core::gradcheck::{self, GradcheckOptions, GradcheckReport, LossTerm};
use simt_core::synth::{generate, SyntheticDataset};
use simt_core::train::{evaluate, TrainState};

use crate::error::{CliError, CliResult};

/// Seed offset for the held-out split; above every shard index so the two
/// splits never share a shard seed.
const HELDOUT_SEED_BIT: u64 = 1 << 63;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const T_TRUE_FILE: &str = "t_true.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SIMT_FILE: &str = "simt.csv";
pub const WEIGHTING_FILE: &str = "weighting.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parsed<T>(path: &Path, r: Result<T, FormatError>) -> CliResult<T> {
    r.map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    parsed(path, config_from_json(&read(path)?))
}

/// Reads a dataset and its header sidecar.
pub fn load_dataset(path: &Path) -> CliResult<SyntheticDataset> {
    let hpath = header_path(path);
    let header = parsed(&hpath, header_from_json(&read(&hpath)?))?;
    parsed(path, dataset_from_jsonl(&read(path)?, &header))
}

fn save_dataset(path: &Path, ds: &SyntheticDataset) -> CliResult<()> {
    write(path, &dataset_to_jsonl(ds))?;
    write(&header_path(path), &header_to_json(&dataset_header(ds)))
}

/// Writes the training and held-out splits plus `T_true` into `out`.
pub fn gen(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let invalid = |e: simt_core::Error| CliError::Invalid(e.to_string());
    let train = generate(&config.spec, config.n, config.data_seed).map_err(invalid)?;
    let heldout =
        generate(&config.spec, config.heldout_n, config.data_seed ^ HELDOUT_SEED_BIT).map_err(invalid)?;
    save_dataset(&out.join(TRAIN_FILE), &train)?;
    save_dataset(&out.join(HELDOUT_FILE), &heldout)?;
    write(&out.join(T_TRUE_FILE), &matrix_to_csv(&config.spec.t_true))?;
    info!(
        "wrote {} training and {} held-out instances to {}",
        train.len(),
        heldout.len(),
        out.display()
    );
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: &'a ExperimentConfig,
    pub data: &'a Path,
    /// Evaluation set; the training data when absent.
    pub heldout: Option<&'a Path>,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    /// Stop (with a checkpoint) after this many steps in this invocation.
    pub max_steps: Option<usize>,
    /// Set asynchronously to request a checkpoint and stop.
    pub interrupted: &'a AtomicBool,
}

fn save_outputs(state: &TrainState, out: &Path) -> CliResult<()> {
    write(&out.join(CHECKPOINT_FILE), &checkpoint_to_json(state))?;
    let t = state.simt().map_err(CliError::from_training)?;
    write(&out.join(SIMT_FILE), &matrix_to_csv(t.matrix()))?;
    write(&out.join(WEIGHTING_FILE), &matrix_to_csv(state.weighting().matrix()))
}

/// Keeps the rows of an existing `metrics.csv` up to `iteration`.
fn resumed_metrics(path: &Path, iteration: usize) -> CliResult<String> {
    let mut text = metrics_header();
    if path.exists() {
        for record in parsed(path, metrics_from_csv(&read(path)?))? {
            if record.iteration <= iteration {
                text.push_str(&metrics_row(&record));
            }
        }
    }
    Ok(text)
}

/// Warm-up (or resume), then the training loop. Writes `metrics.csv`,
/// `simt.csv`, `weighting.csv` and `checkpoint.json` into `out`.
pub fn train(args: TrainArgs<'_>) -> CliResult<TrainState> {
    let config = args.config;
    let dataset = load_dataset(args.data)?;
    let heldout = match args.heldout {
        Some(path) => load_dataset(path)?,
        None => {
            warn!("no held-out set given; evaluating on the training data");
            dataset.clone()
        }
    };
    if dataset.spec.closed != config.train.closed {
        return Err(CliError::Invalid(format!(
            "dataset has {} closed classes, config has {}",
            dataset.spec.closed, config.train.closed
        )));
    }
    if heldout.spec.closed != dataset.spec.closed || heldout.spec.dim != dataset.spec.dim {
        return Err(CliError::Invalid("held-out set does not match the training data".into()));
    }

    let metrics_path = args.out.join(METRICS_FILE);
    let (mut state, mut metrics) = match args.resume {
        Some(path) => {
            let state = parsed(path, checkpoint_from_json(&read(path)?))?;
            if state.config.closed != dataset.spec.closed || state.model.input_dim() != dataset.spec.dim {
                return Err(CliError::Invalid("checkpoint does not match the dataset".into()));
            }
            info!("resuming at iteration {}", state.iter);
            let metrics = resumed_metrics(&metrics_path, state.iter)?;
            (state, metrics)
        }
        None => (
            TrainState::initialize(&dataset, &config.train).map_err(|e| CliError::Invalid(e.to_string()))?,
            metrics_header(),
        ),
    };
    write(&metrics_path, &metrics)?;

    let total = state.config.train_iters;
    let stop = args.max_steps.map_or(total, |m| total.min(state.iter.saturating_add(m)));
    while state.iter < stop {
        if args.interrupted.load(Ordering::SeqCst) {
            save_outputs(&state, args.out)?;
            write(&metrics_path, &metrics)?;
            return Err(CliError::Interrupted(state.iter));
        }
        state.step(&dataset).map_err(CliError::from_training)?;
        if state.iter == total || state.iter % config.eval_every == 0 {
            let record = evaluate(&state, &heldout).map_err(|e| CliError::Invalid(e.to_string()))?;
            info!(
                "iter {:>6}  loss {:.5}  closed_mae {:.4}  open_mae {:.4}  acc {:.4}  open_f1 {:.3}",
                record.iteration,
                record.loss_total,
                record.closed_mae,
                record.open_mae,
                record.accuracy,
                record.open_f1
            );
            metrics.push_str(&metrics_row(&record));
            write(&metrics_path, &metrics)?;
            save_outputs(&state, args.out)?;
        }
    }
    save_outputs(&state, args.out)?;
    Ok(state)
}

/// Metrics of a checkpoint on a dataset, as one JSON object.
pub fn eval(checkpoint: &Path, data: &Path) -> CliResult<String> {
    let state = parsed(checkpoint, checkpoint_from_json(&read(checkpoint)?))?;
    let dataset = load_dataset(data)?;
    if dataset.spec.closed != state.config.closed || dataset.spec.dim != state.model.input_dim() {
        return Err(CliError::Invalid(format!(
            "checkpoint is for C = {} with {} features; dataset has C = {} with {}",
            state.config.closed,
            state.model.input_dim(),
            dataset.spec.closed,
            dataset.spec.dim
        )));
    }
    let record = evaluate(&state, &dataset).map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(serde_json::to_string_pretty(&record).expect("metrics serialize"))
}

pub fn gradcheck(seed: u64, instances: usize, corrupt: Option<LossTerm>) -> CliResult<GradcheckReport> {
    let options = GradcheckOptions {
        seed,
        instances,
        corrupt,
        ..GradcheckOptions::default()
    };
    gradcheck::run(&options).map_err(|e| CliError::Invalid(e.to_string()))
}

pub fn out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.unwrap_or_else(|| config.out_dir.clone())
}
