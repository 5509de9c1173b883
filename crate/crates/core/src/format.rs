//! On-disk formats.
//!
//! - Matrices (`T`, `u`, `T_true`): CSV, one line per row, every value in
//!   scientific notation with 17 significant digits so `f64` round-trips
//!   exactly.
//! - Datasets: JSON Lines with one instance per line (`features`,
//!   `clean_label`, `pseudo_label`) plus a JSON header sidecar holding the
//!   generating spec, seed and instance count. Labels are 1-based on disk
//!   and 0-based in memory.
//! - Experiment configs and checkpoints: single JSON documents.
//! - Metrics: CSV with the fixed column order of [`MetricsRecord::COLUMNS`].
//!
//! Every parser takes text and reports the offending line or key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::linalg::Matrix;
use crate::model::ClassifierParams;
use crate::simt::{SimTParams, WeightingParams};
use crate::synth::{GroundTruthSpec, SyntheticDataset};
use crate::train::{LossTerms, MetricsRecord, RngState, TrainConfig, TrainState};

/// Version tag written into checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{what}: line {line}, column {column}: {message}")]
    Json {
        what: &'static str,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{what}: line {line}: {message}")]
    Line {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("{what}: invalid `{key}`: {source}")]
    Invalid {
        what: &'static str,
        key: String,
        #[source]
        source: Error,
    },
}

impl FormatError {
    fn json(what: &'static str, e: serde_json::Error) -> Self {
        FormatError::Json {
            what,
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }

    fn line(what: &'static str, line: usize, message: impl Into<String>) -> Self {
        FormatError::Line {
            what,
            line,
            message: message.into(),
        }
    }

    fn invalid(what: &'static str, key: impl Into<String>, source: Error) -> Self {
        FormatError::Invalid {
            what,
            key: key.into(),
            source,
        }
    }
}

pub type FormatResult<T> = std::result::Result<T, FormatError>;

/// 17 significant digits: one before the point, sixteen after.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str) -> Option<f64> {
    let v: f64 = field.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

// ---------------------------------------------------------------- matrices

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> FormatResult<Matrix> {
    const WHAT: &str = "matrix CSV";
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut n = 0;
        for field in line.split(',') {
            let v = parse_f64(field)
                .ok_or_else(|| FormatError::line(WHAT, i + 1, format!("bad number {field:?}")))?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(FormatError::line(WHAT, i + 1, format!("{n} fields, expected {c}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| FormatError::line(WHAT, 1, "no rows"))?;
    Matrix::from_vec(rows, cols, data).map_err(|e| FormatError::invalid(WHAT, "matrix", e))
}

// ---------------------------------------------------------------- datasets

/// Sidecar header of a JSON Lines dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub spec: GroundTruthSpec,
    pub seed: u64,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    features: Vec<f64>,
    clean_label: usize,
    pseudo_label: usize,
}

/// `data.jsonl` → `data.header.json`.
pub fn header_path(data: &Path) -> PathBuf {
    data.with_extension("header.json")
}

pub fn dataset_header(ds: &SyntheticDataset) -> DatasetHeader {
    DatasetHeader {
        spec: ds.spec.clone(),
        seed: ds.seed,
        n: ds.len(),
    }
}

pub fn header_to_json(header: &DatasetHeader) -> String {
    let mut s = serde_json::to_string_pretty(header).expect("header serializes");
    s.push('\n');
    s
}

pub fn header_from_json(text: &str) -> FormatResult<DatasetHeader> {
    const WHAT: &str = "dataset header";
    let header: DatasetHeader =
        serde_json::from_str(text).map_err(|e| FormatError::json(WHAT, e))?;
    header
        .spec
        .validate()
        .map_err(|e| FormatError::invalid(WHAT, "spec", e))?;
    if header.n == 0 {
        return Err(FormatError::invalid(WHAT, "n", Error::EmptyInput("dataset")));
    }
    Ok(header)
}

pub fn dataset_to_jsonl(ds: &SyntheticDataset) -> String {
    let mut out = String::new();
    for i in 0..ds.len() {
        let record = Record {
            features: ds.features.row(i).to_vec(),
            clean_label: ds.clean_labels[i] + 1,
            pseudo_label: ds.pseudo_labels[i] + 1,
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses dataset lines against their header.
pub fn dataset_from_jsonl(text: &str, header: &DatasetHeader) -> FormatResult<SyntheticDataset> {
    const WHAT: &str = "dataset";
    let spec = &header.spec;
    let mut features = Vec::new();
    let mut clean_labels = Vec::new();
    let mut pseudo_labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let record: Record = serde_json::from_str(line)
            .map_err(|e| FormatError::line(WHAT, lineno, e.to_string()))?;
        if record.features.len() != spec.dim {
            return Err(FormatError::line(
                WHAT,
                lineno,
                format!("`features` has {} values, expected {}", record.features.len(), spec.dim),
            ));
        }
        let label = |v: usize, max: usize, key: &str| {
            if (1..=max).contains(&v) {
                Ok(v - 1)
            } else {
                Err(FormatError::line(
                    WHAT,
                    lineno,
                    format!("`{key}` {v} outside 1..={max}"),
                ))
            }
        };
        clean_labels.push(label(record.clean_label, spec.total_classes(), "clean_label")?);
        pseudo_labels.push(label(record.pseudo_label, spec.closed, "pseudo_label")?);
        features.extend(record.features);
    }
    if clean_labels.len() != header.n {
        return Err(FormatError::line(
            WHAT,
            text.lines().count().max(1),
            format!("{} instances, header says {}", clean_labels.len(), header.n),
        ));
    }
    let n = clean_labels.len();
    let features = Matrix::from_vec(n, spec.dim, features)
        .map_err(|e| FormatError::invalid(WHAT, "features", e))?;
    let ds = SyntheticDataset {
        features,
        clean_labels,
        pseudo_labels,
        spec: spec.clone(),
        seed: header.seed,
    };
    ds.validate().map_err(|e| FormatError::invalid(WHAT, "dataset", e))?;
    Ok(ds)
}

// ---------------------------------------------------------------- configs

fn default_eval_every() -> usize {
    1000
}

fn default_heldout() -> usize {
    5000
}

/// Everything one experiment needs: the generator, the training
/// hyper-parameters and where results go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: GroundTruthSpec,
    pub train: TrainConfig,
    /// Training-set size produced by `gen`.
    pub n: usize,
    /// Held-out set size produced by `gen`.
    #[serde(default = "default_heldout")]
    pub heldout_n: usize,
    /// Generator seed.
    pub data_seed: u64,
    pub out_dir: PathBuf,
    /// Iterations between evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl ExperimentConfig {
    /// The shipped toy experiment.
    pub fn toy() -> Self {
        let train = TrainConfig {
            alpha: 0.3,
            tau_high: 0.65,
            tau_low: 0.55,
            base_lr: 0.05,
            head_lr: 0.5,
            ..TrainConfig::reference_defaults(3, 2)
        };
        Self {
            spec: GroundTruthSpec::toy(4.0),
            train,
            n: 20000,
            heldout_n: 5000,
            data_seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            eval_every: 1000,
        }
    }

    /// Checks every component; errors name the offending key.
    pub fn validate(&self) -> FormatResult<()> {
        const WHAT: &str = "config";
        self.spec
            .validate()
            .map_err(|e| FormatError::invalid(WHAT, "spec", e))?;
        self.train
            .validate()
            .map_err(|e| FormatError::invalid(WHAT, "train", e))?;
        if self.train.closed != self.spec.closed {
            return Err(FormatError::invalid(
                WHAT,
                "train.closed",
                Error::ShapeMismatch(format!(
                    "{} closed classes, spec has {}",
                    self.train.closed, self.spec.closed
                )),
            ));
        }
        if self.n == 0 {
            return Err(FormatError::invalid(WHAT, "n", Error::EmptyInput("training set")));
        }
        if self.heldout_n == 0 {
            return Err(FormatError::invalid(WHAT, "heldout_n", Error::EmptyInput("held-out set")));
        }
        if self.eval_every == 0 {
            return Err(FormatError::invalid(
                WHAT,
                "eval_every",
                Error::InvalidParameter("must be positive".into()),
            ));
        }
        Ok(())
    }
}

pub fn config_to_json(config: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}

pub fn config_from_json(text: &str) -> FormatResult<ExperimentConfig> {
    let config: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| FormatError::json("config", e))?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------- checkpoints

/// Serialized [`TrainState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub iter: usize,
    pub fixed: ClassifierParams,
    pub model: ClassifierParams,
    pub simt: SimTParams,
    pub weighting: WeightingParams,
    pub last_losses: LossTerms,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(state: &TrainState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: state.config.clone(),
            iter: state.iter,
            fixed: state.fixed.clone(),
            model: state.model.clone(),
            simt: state.simt.clone(),
            weighting: state.weighting.clone(),
            last_losses: state.last_losses,
            rng: RngState::capture(&state.rng),
        }
    }

    /// Rebuilds the training state after checking every shape.
    pub fn restore(self) -> FormatResult<TrainState> {
        const WHAT: &str = "checkpoint";
        let bad = |key: &str, e: Error| FormatError::invalid(WHAT, key, e);
        let shape = |msg: &str| Error::ShapeMismatch(msg.into());
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(
                "version",
                Error::InvalidParameter(format!("unsupported version {}", self.version)),
            ));
        }
        let c = &self.config;
        c.validate().map_err(|e| bad("config", e))?;
        if self.iter > c.train_iters {
            return Err(bad("iter", Error::InvalidParameter("past train_iters".into())));
        }
        self.fixed.validate().map_err(|e| bad("fixed", e))?;
        self.model.validate().map_err(|e| bad("model", e))?;
        if self.fixed.output_dim() != c.closed {
            return Err(bad("fixed", shape("output width differs from C")));
        }
        if self.model.output_dim() != c.total_classes()
            || self.model.input_dim() != self.fixed.input_dim()
            || self.model.hidden_dim() != self.fixed.hidden_dim()
        {
            return Err(bad("model", shape("does not extend the warm-up model")));
        }
        self.simt.validate().map_err(|e| bad("simt", e))?;
        if self.simt.closed != c.closed || self.simt.open != c.open {
            return Err(bad("simt", shape("class counts differ from config")));
        }
        let total = c.total_classes();
        if self.weighting.w.shape() != (total, total) {
            return Err(bad("weighting", shape("W must be (C+n)x(C+n)")));
        }
        for (key, v) in [
            ("last_losses.corrected", self.last_losses.corrected),
            ("last_losses.aux", self.last_losses.aux),
            ("last_losses.volume", self.last_losses.volume),
            ("last_losses.anchor", self.last_losses.anchor),
            ("last_losses.convex", self.last_losses.convex),
            ("last_losses.total", self.last_losses.total),
        ] {
            if !v.is_finite() {
                return Err(bad(key, Error::NonFinite(key.into())));
            }
        }
        let rng = self.rng.restore().map_err(|e| bad("rng", e))?;
        Ok(TrainState {
            config: self.config,
            fixed: self.fixed,
            model: self.model,
            simt: self.simt,
            weighting: self.weighting,
            iter: self.iter,
            last_losses: self.last_losses,
            rng,
        })
    }
}

pub fn checkpoint_to_json(state: &TrainState) -> String {
    let mut s = serde_json::to_string_pretty(&Checkpoint::capture(state)).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_json(text: &str) -> FormatResult<TrainState> {
    let checkpoint: Checkpoint =
        serde_json::from_str(text).map_err(|e| FormatError::json("checkpoint", e))?;
    checkpoint.restore()
}

// ---------------------------------------------------------------- metrics

pub fn metrics_header() -> String {
    let mut s = MetricsRecord::COLUMNS.join(",");
    s.push('\n');
    s
}

pub fn metrics_row(record: &MetricsRecord) -> String {
    let mut s = record.iteration.to_string();
    for v in record.values() {
        let _ = write!(s, ",{}", format_f64(v));
    }
    s.push('\n');
    s
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut s = metrics_header();
    for r in records {
        s.push_str(&metrics_row(r));
    }
    s
}

pub fn metrics_from_csv(text: &str) -> FormatResult<Vec<MetricsRecord>> {
    const WHAT: &str = "metrics CSV";
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == MetricsRecord::COLUMNS.join(",") => {}
        Some((i, _)) => return Err(FormatError::line(WHAT, i + 1, "unexpected header")),
        None => return Err(FormatError::line(WHAT, 1, "missing header")),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != MetricsRecord::COLUMNS.len() {
            return Err(FormatError::line(
                WHAT,
                i + 1,
                format!("{} fields, expected {}", fields.len(), MetricsRecord::COLUMNS.len()),
            ));
        }
        let iteration = fields[0]
            .trim()
            .parse()
            .map_err(|_| FormatError::line(WHAT, i + 1, "bad iteration"))?;
        let mut v = [0.0; 13];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = parse_f64(fields[k + 1]).ok_or_else(|| {
                FormatError::line(
                    WHAT,
                    i + 1,
                    format!("bad `{}` value", MetricsRecord::COLUMNS[k + 1]),
                )
            })?;
        }
        records.push(MetricsRecord {
            iteration,
            lr: v[0],
            loss_corrected: v[1],
            loss_aux: v[2],
            loss_volume: v[3],
            loss_anchor: v[4],
            loss_convex: v[5],
            loss_total: v[6],
            closed_mae: v[7],
            open_mae: v[8],
            accuracy: v[9],
            open_precision: v[10],
            open_recall: v[11],
            open_f1: v[12],
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    #[test]
    fn csv_round_trips_exactly() {
        let m = Matrix::from_rows(&[[0.1, 1.0 / 3.0], [1e-300, -2.5e17]]).unwrap();
        let text = matrix_to_csv(&m);
        assert_eq!(matrix_from_csv(&text).unwrap(), m);
        assert!(text.starts_with("1.0000000000000001e-1,3.3333333333333331e-1\n"));
    }

    #[test]
    fn csv_reports_line() {
        let err = matrix_from_csv("1,2\n3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(matrix_from_csv("1,nan\n").is_err());
        assert!(matrix_from_csv("").is_err());
    }

    #[test]
    fn dataset_round_trip_uses_one_based_labels() {
        let ds = generate(&GroundTruthSpec::toy(4.0), 50, 3).unwrap();
        let header = dataset_header(&ds);
        let text = dataset_to_jsonl(&ds);
        assert_eq!(text.lines().count(), 50);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["clean_label"].as_u64().unwrap() as usize, ds.clean_labels[0] + 1);
        let header = header_from_json(&header_to_json(&header)).unwrap();
        assert_eq!(dataset_from_jsonl(&text, &header).unwrap(), ds);
    }

    #[test]
    fn dataset_rejects_zero_label() {
        let ds = generate(&GroundTruthSpec::toy(4.0), 2, 3).unwrap();
        let header = dataset_header(&ds);
        let text = dataset_to_jsonl(&ds).replacen('}', ",\"extra\":1}", 1);
        assert!(dataset_from_jsonl(&text, &header).is_err());
        let line = format!("{{\"features\":{:?},\"clean_label\":1,\"pseudo_label\":0}}\n", vec![0.0; 8]);
        let err = dataset_from_jsonl(&line, &DatasetHeader { n: 1, ..header }).unwrap_err();
        assert!(err.to_string().contains("pseudo_label"), "{err}");
    }

    #[test]
    fn config_diagnostics_name_key() {
        let mut config = ExperimentConfig::toy();
        let text = config_to_json(&config);
        assert_eq!(config_from_json(&text).unwrap(), config);

        config.train.tau_low = 0.9;
        let err = config_from_json(&config_to_json(&config)).unwrap_err();
        assert!(err.to_string().contains("`train`"), "{err}");

        let err = config_from_json(&text.replacen("\"n\":", "\"bogus\": 1, \"n\":", 1)).unwrap_err();
        match err {
            FormatError::Json { line, message, .. } => {
                assert!(line > 1);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn metrics_round_trip() {
        let record = MetricsRecord {
            iteration: 7,
            lr: 0.1,
            loss_corrected: 1.0 / 3.0,
            loss_aux: 0.0,
            loss_volume: -1.25,
            loss_anchor: 2e-9,
            loss_convex: -0.5,
            loss_total: 1.0,
            closed_mae: 0.01,
            open_mae: 0.2,
            accuracy: 0.99,
            open_precision: 0.5,
            open_recall: 1.0,
            open_f1: 2.0 / 3.0,
        };
        let text = metrics_to_csv(&[record.clone(), record.clone()]);
        assert_eq!(metrics_from_csv(&text).unwrap(), vec![record.clone(), record]);
        assert!(metrics_from_csv("iteration\n").is_err());
    }

    #[test]
    fn matrix_json_is_validated() {
        assert!(serde_json::from_str::<Matrix>(r#"{"rows":2,"cols":2,"data":[1,2,3]}"#).is_err());
        let huge = format!(r#"{{"rows":{},"cols":2,"data":[]}}"#, usize::MAX);
        assert!(serde_json::from_str::<Matrix>(&huge).is_err());
    }
}
