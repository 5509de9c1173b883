//! Synthetic pseudo-labeled data with a known transition matrix, and the
//! oracles that score an estimated SimT against it.
//!
//! Each instance draws a clean class from the mixing weights, a feature
//! vector from that class's isotropic Gaussian, and a pseudo label from the
//! class's row of the ground-truth transition matrix. Open classes (indices
//! `C..C+n_true`) never appear as pseudo labels.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::simt::{validate_distribution, SimT};

/// Instances generated per independently seeded shard.
pub const SHARD_SIZE: usize = 4096;

/// Generative description of a synthetic noisy-label problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub closed: usize,
    pub open_true: usize,
    pub dim: usize,
    /// One mean per clean class, `(C + n_true) × dim`.
    pub means: Matrix,
    pub std: f64,
    pub mixing: Vec<f64>,
    /// `(C + n_true) × C`, row-stochastic.
    pub t_true: Matrix,
}

impl GroundTruthSpec {
    /// Canonical toy problem: three pseudo-label classes, two hidden open
    /// classes, eight-dimensional features.
    ///
    /// Class `j` is centered at `separation · e_j`. Closed rows keep 70–75% of
    /// their mass on the diagonal; each open class is pseudo-labeled as a
    /// near-even split between two closed classes.
    pub fn toy(separation: f64) -> Self {
        let (closed, open_true, dim) = (3, 2, 8);
        let total = closed + open_true;
        let means = Matrix::from_fn(total, dim, |j, k| if j == k { separation } else { 0.0 });
        let t_true = Matrix::from_rows(&[
            [0.75, 0.15, 0.10],
            [0.10, 0.70, 0.20],
            [0.20, 0.10, 0.70],
            [0.50, 0.45, 0.05],
            [0.05, 0.45, 0.50],
        ])
        .expect("static matrix");
        Self {
            closed,
            open_true,
            dim,
            means,
            std: 1.0,
            mixing: vec![0.2; total],
            t_true,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.closed + self.open_true
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.total_classes();
        if self.closed == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter(
                "closed class count and dimension must be positive".into(),
            ));
        }
        if self.means.shape() != (total, self.dim) {
            return Err(Error::ShapeMismatch(format!(
                "means are {:?}, expected ({total}, {})",
                self.means.shape(),
                self.dim
            )));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::InvalidParameter(format!("std {} must be positive", self.std)));
        }
        validate_distribution(&self.mixing, total)
            .map_err(|e| Error::InvalidParameter(format!("mixing weights: {e}")))?;
        if self.t_true.shape() != (total, self.closed) {
            return Err(Error::ShapeMismatch(format!(
                "T_true is {:?}, expected ({total}, {})",
                self.t_true.shape(),
                self.closed
            )));
        }
        for (j, row) in self.t_true.row_iter().enumerate() {
            validate_distribution(row, self.closed)
                .map_err(|e| Error::InvalidParameter(format!("T_true row {j}: {e}")))?;
            if j < self.closed && row.iter().any(|&v| v > row[j]) {
                return Err(Error::InvalidParameter(format!(
                    "T_true closed row {j} is not diagonally dominant"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub features: Matrix,
    pub clean_labels: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub spec: GroundTruthSpec,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyInput("dataset"));
        }
        if self.features.shape() != (n, self.spec.dim) || self.pseudo_labels.len() != n {
            return Err(Error::ShapeMismatch("dataset columns disagree in length".into()));
        }
        if self.clean_labels.iter().any(|&y| y >= self.spec.total_classes()) {
            return Err(Error::InvalidParameter("clean label out of range".into()));
        }
        if self.pseudo_labels.iter().any(|&y| y >= self.spec.closed) {
            return Err(Error::InvalidParameter("pseudo label out of range".into()));
        }
        Ok(())
    }

    /// Copies the listed instances into a new dataset.
    pub fn subset(&self, idx: &[usize]) -> SyntheticDataset {
        SyntheticDataset {
            features: self.features.select_rows(idx),
            clean_labels: idx.iter().map(|&i| self.clean_labels[i]).collect(),
            pseudo_labels: idx.iter().map(|&i| self.pseudo_labels[i]).collect(),
            spec: self.spec.clone(),
            seed: self.seed,
        }
    }
}

/// Inverse-CDF draw from a probability vector.
fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Round-off can leave the cumulative sum just below one.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `n` instances. Shard `s` (instances `s·SHARD_SIZE..`) uses seed
/// `seed ^ s`, so output does not depend on how shards are scheduled.
pub fn generate(spec: &GroundTruthSpec, n: usize, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("requested instance count"));
    }
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut clean_labels = Vec::with_capacity(n);
    let mut pseudo_labels = Vec::with_capacity(n);
    for (shard, start) in (0..n).step_by(SHARD_SIZE).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ shard as u64);
        for _ in start..(start + SHARD_SIZE).min(n) {
            let y = categorical(&spec.mixing, &mut rng);
            for &mu in spec.means.row(y) {
                let z: f64 = rng.sample(StandardNormal);
                features.push(mu + spec.std * z);
            }
            clean_labels.push(y);
            pseudo_labels.push(categorical(spec.t_true.row(y), &mut rng));
        }
    }
    Ok(SyntheticDataset {
        features: Matrix::from_vec(n, spec.dim, features)?,
        clean_labels,
        pseudo_labels,
        spec: spec.clone(),
        seed,
    })
}

/// Empirical pseudo-label frequencies.
pub fn class_dist(pseudo_labels: &[usize], closed: usize) -> Result<Vec<f64>> {
    if pseudo_labels.is_empty() {
        return Err(Error::EmptyInput("pseudo labels"));
    }
    let mut counts = vec![0usize; closed];
    for &y in pseudo_labels {
        if y >= closed {
            return Err(Error::InvalidParameter(format!("pseudo label {y} outside 0..{closed}")));
        }
        counts[y] += 1;
    }
    let n = pseudo_labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Empirical flip-frequency matrix built from clean labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionOracle {
    pub matrix: Matrix,
    /// Clean classes with no instances; their rows are uniform.
    pub unsupported: Vec<usize>,
}

pub fn confusion_oracle(
    clean_labels: &[usize],
    pseudo_labels: &[usize],
    closed: usize,
    open_true: usize,
) -> Result<ConfusionOracle> {
    if clean_labels.len() != pseudo_labels.len() {
        return Err(Error::ShapeMismatch("label vectors differ in length".into()));
    }
    let total = closed + open_true;
    let mut counts = Matrix::zeros(total, closed);
    for (&y, &py) in clean_labels.iter().zip(pseudo_labels) {
        if y >= total || py >= closed {
            return Err(Error::InvalidParameter(format!("label pair ({y}, {py}) out of range")));
        }
        counts[(y, py)] += 1.0;
    }
    let mut unsupported = Vec::new();
    for j in 0..total {
        let row = counts.row_mut(j);
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            row.fill(1.0 / closed as f64);
            unsupported.push(j);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    if !unsupported.is_empty() {
        warn!("confusion oracle: no instances for clean classes {unsupported:?}");
    }
    Ok(ConfusionOracle {
        matrix: counts,
        unsupported,
    })
}

/// Estimation error of a SimT against the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimtErrorReport {
    pub closed_mae: f64,
    pub open_mae: f64,
    /// `matching[i]` is the estimated open row (0-based within the open
    /// block) assigned to true open row `i`.
    pub matching: Vec<usize>,
}

fn row_mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Largest estimated-open-row count handled by the exact subset search.
const MAX_EXACT_OPEN: usize = 20;

/// Closed-block MAE and the minimum open-block MAE over all one-to-one
/// assignments of true open rows to estimated open rows.
pub fn simt_error(t_est: &SimT, t_true: &Matrix) -> Result<SimtErrorReport> {
    let est = t_est.matrix();
    let c = t_est.closed();
    if t_true.cols() != c || t_true.rows() < c {
        return Err(Error::ShapeMismatch(format!(
            "T_true {:?} vs estimate {:?}",
            t_true.shape(),
            est.shape()
        )));
    }
    let (n_est, n_true) = (est.rows() - c, t_true.rows() - c);
    if n_est < n_true {
        return Err(Error::ShapeMismatch(format!(
            "{n_est} estimated open rows cannot cover {n_true} true open rows"
        )));
    }
    let closed_mae = (0..c).map(|j| row_mae(est.row(j), t_true.row(j))).sum::<f64>() / c as f64;
    if n_true == 0 {
        return Ok(SimtErrorReport {
            closed_mae,
            open_mae: 0.0,
            matching: Vec::new(),
        });
    }
    let cost: Vec<Vec<f64>> = (0..n_true)
        .map(|i| (0..n_est).map(|e| row_mae(t_true.row(c + i), est.row(c + e))).collect())
        .collect();
    let matching = if n_est <= MAX_EXACT_OPEN {
        min_cost_assignment(&cost, n_est)
    } else {
        greedy_assignment(&cost, n_est)
    };
    let open_mae = matching
        .iter()
        .enumerate()
        .map(|(i, &e)| cost[i][e])
        .sum::<f64>()
        / n_true as f64;
    Ok(SimtErrorReport {
        closed_mae,
        open_mae,
        matching,
    })
}

/// Exact minimum-cost injection of rows into columns by dynamic programming
/// over subsets of used columns.
fn min_cost_assignment(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let rows = cost.len();
    let states = 1usize << cols;
    // best[mask]: minimal cost of assigning the first popcount(mask) rows to `mask`.
    let mut best = vec![f64::INFINITY; states];
    let mut choice = vec![usize::MAX; states];
    best[0] = 0.0;
    for mask in 0..states {
        let i = mask.count_ones() as usize;
        if i >= rows || !best[mask].is_finite() {
            continue;
        }
        for e in (0..cols).filter(|e| mask & (1 << e) == 0) {
            let next = mask | (1 << e);
            let c = best[mask] + cost[i][e];
            if c < best[next] {
                best[next] = c;
                choice[next] = e;
            }
        }
    }
    let mut mask = (0..states)
        .filter(|m| m.count_ones() as usize == rows)
        .min_by(|&a, &b| best[a].total_cmp(&best[b]))
        .expect("at least one full assignment");
    let mut out = vec![0; rows];
    for i in (0..rows).rev() {
        let e = choice[mask];
        out[i] = e;
        mask &= !(1 << e);
    }
    out
}

fn greedy_assignment(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let mut used = vec![false; cols];
    cost.iter()
        .map(|row| {
            let e = (0..cols)
                .filter(|&e| !used[e])
                .min_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("enough columns");
            used[e] = true;
            e
        })
        .collect()
}
