//! The simplex transition matrix, its weighting matrix, and the three
//! regularizers that shape it.
//!
//! A SimT is a row-stochastic `(C+n) × C` matrix: row `j` is the distribution
//! of pseudo labels produced by instances whose true class is `j`. The first
//! `C` rows describe closed-set noise, the trailing `n` rows open-set noise.
//! It is never stored directly; it is materialized from a free matrix `U`
//! through `V = c · σ(U) + I` followed by row normalization, where `c` is the
//! pseudo-label class distribution and `I` the identity on closed rows.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Lower bound applied to class-distribution entries before use.
pub const CLASS_DIST_FLOOR: f64 = 1e-6;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Free parameters of a SimT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTParams {
    pub u: Matrix,
    pub class_dist: Vec<f64>,
    pub closed: usize,
    pub open: usize,
}

impl SimTParams {
    pub fn new(u: Matrix, class_dist: Vec<f64>, closed: usize, open: usize) -> Result<Self> {
        let params = Self {
            u,
            class_dist,
            closed,
            open,
        };
        params.validate()?;
        if params.open <= 1 {
            warn!(
                "SimT with {} open-set slot(s); several slots model diverse open semantics better",
                params.open
            );
        }
        Ok(params)
    }

    /// Draws `U` entrywise from `N(0, 2/C)`.
    pub fn init<R: Rng + ?Sized>(
        closed: usize,
        open: usize,
        class_dist: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if closed == 0 {
            return Err(Error::InvalidParameter("closed class count must be positive".into()));
        }
        let normal = Normal::new(0.0, (2.0 / closed as f64).sqrt()).expect("valid std");
        let u = Matrix::from_fn(closed + open, closed, |_, _| normal.sample(rng));
        Self::new(u, class_dist, closed, open)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.closed, self.open);
        if c == 0 {
            return Err(Error::InvalidParameter("closed class count must be positive".into()));
        }
        if self.u.shape() != (c + n, c) {
            return Err(Error::ShapeMismatch(format!(
                "U is {:?}, expected ({}, {c})",
                self.u.shape(),
                c + n
            )));
        }
        validate_distribution(&self.class_dist, c)?;
        if !self.u.is_finite() {
            return Err(Error::NonFinite("SimT parameter U".into()));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.closed + self.open
    }

    fn prior_weight(&self, k: usize) -> f64 {
        self.class_dist[k].max(CLASS_DIST_FLOOR)
    }
}

pub(crate) fn validate_distribution(dist: &[f64], len: usize) -> Result<()> {
    if dist.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "class distribution has {} entries, expected {len}",
            dist.len()
        )));
    }
    if dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter(
            "class distribution entries must lie in [0, 1]".into(),
        ));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "class distribution sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// A materialized, row-stochastic transition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSimT")]
pub struct SimT {
    t: Matrix,
    closed: usize,
}

#[derive(Deserialize)]
struct RawSimT {
    t: Matrix,
    closed: usize,
}

impl TryFrom<RawSimT> for SimT {
    type Error = Error;

    fn try_from(raw: RawSimT) -> Result<Self> {
        SimT::from_matrix(raw.t, raw.closed)
    }
}

impl SimT {
    /// Wraps an explicit matrix after checking the SimT invariants.
    pub fn from_matrix(t: Matrix, closed: usize) -> Result<Self> {
        if t.cols() != closed || t.rows() < closed {
            return Err(Error::ShapeMismatch(format!(
                "SimT must be (C+n)x{closed}, got {:?}",
                t.shape()
            )));
        }
        for (j, row) in t.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParameter(format!("row {j} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!("row {j} sums to {sum}")));
            }
            if j < closed && row.iter().any(|&v| v > row[j]) {
                return Err(Error::InvalidParameter(format!(
                    "closed row {j} is not diagonally dominant"
                )));
            }
        }
        Ok(Self { t, closed })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn closed(&self) -> usize {
        self.closed
    }

    pub fn open(&self) -> usize {
        self.t.rows() - self.closed
    }

    pub fn total_classes(&self) -> usize {
        self.t.rows()
    }
}

/// `T_jk = V_jk / Σ_k V_jk` with `V_jk = c_k σ(U_jk) + [j = k < C]`.
pub fn materialize_simt(params: &SimTParams) -> Result<SimT> {
    let c = params.closed;
    let v = Matrix::from_fn(params.total_classes(), c, |j, k| {
        let prior = if j == k { 1.0 } else { 0.0 };
        params.prior_weight(k) * sigmoid(params.u[(j, k)]) + prior
    });
    Ok(SimT {
        t: linalg::row_normalize(&v)?,
        closed: c,
    })
}

/// Pulls a gradient with respect to `T` back to `U`.
pub fn backprop_simt(params: &SimTParams, dl_dt: &Matrix) -> Result<Matrix> {
    let (rows, c) = (params.total_classes(), params.closed);
    if dl_dt.shape() != (rows, c) {
        return Err(Error::ShapeMismatch(format!(
            "dL/dT is {:?}, expected ({rows}, {c})",
            dl_dt.shape()
        )));
    }
    let mut grad = Matrix::zeros(rows, c);
    for j in 0..rows {
        let sig: Vec<f64> = params.u.row(j).iter().map(|&x| sigmoid(x)).collect();
        let v: Vec<f64> = (0..c)
            .map(|k| params.prior_weight(k) * sig[k] + if j == k { 1.0 } else { 0.0 })
            .collect();
        let s: f64 = v.iter().sum();
        if !(s > linalg::DEGENERATE_FLOOR) {
            return Err(Error::ZeroRow { row: j, sum: s });
        }
        let g = dl_dt.row(j);
        // Σ_m g_m T_m
        let mean: f64 = g.iter().zip(&v).map(|(gm, vm)| gm * vm).sum::<f64>() / s;
        for k in 0..c {
            let dl_dv = (g[k] - mean) / s;
            grad[(j, k)] = dl_dv * params.prior_weight(k) * sig[k] * (1.0 - sig[k]);
        }
    }
    Ok(grad)
}

/// Log volume of the parallelotope spanned by the columns of `T`.
pub fn volume_loss(t: &SimT) -> Result<f64> {
    linalg::gram_logvol(&t.t)
}

pub fn volume_loss_grad(t: &SimT) -> Result<Matrix> {
    linalg::grad_gram_logvol(&t.t)
}

/// Noisy posteriors of the detected anchor points, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub posteriors: Matrix,
    pub present: Vec<bool>,
}

impl AnchorSet {
    pub fn empty(total: usize, closed: usize) -> Self {
        Self {
            posteriors: Matrix::zeros(total, closed),
            present: vec![false; total],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.present.len() != self.posteriors.rows() {
            return Err(Error::ShapeMismatch("anchor mask length".into()));
        }
        for (c, _) in self.present.iter().enumerate().filter(|(_, &p)| p) {
            let sum: f64 = self.posteriors.row(c).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "anchor posterior for class {c} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Squared distance between each present class's SimT row and its anchor's
/// noisy posterior, with the gradient with respect to `T`.
pub fn anchor_loss(t: &SimT, anchors: &AnchorSet) -> Result<(f64, Matrix)> {
    let tm = &t.t;
    if anchors.posteriors.shape() != tm.shape() || anchors.present.len() != tm.rows() {
        return Err(Error::ShapeMismatch(format!(
            "anchor set {:?} vs SimT {:?}",
            anchors.posteriors.shape(),
            tm.shape()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(tm.rows(), tm.cols());
    for c in (0..tm.rows()).filter(|&c| anchors.present[c]) {
        for k in 0..tm.cols() {
            let diff = tm[(c, k)] - anchors.posteriors[(c, k)];
            loss += diff * diff;
            grad[(c, k)] = 2.0 * diff;
        }
    }
    Ok((loss, grad))
}

/// Free parameters of the convex-combination weighting matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingParams {
    pub w: Matrix,
}

impl WeightingParams {
    /// Equal logits everywhere, i.e. uniform convex weights.
    pub fn uniform(total: usize) -> Self {
        let init = if total > 1 { 1.0 / (total as f64 - 1.0) } else { 0.0 };
        Self {
            w: Matrix::filled(total, total, init),
        }
    }
}

/// Convex-combination coefficients: `-1` on the diagonal, each row's
/// off-diagonal entries a probability vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightingMatrix {
    u: Matrix,
}

impl WeightingMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.u
    }

    /// Wraps an explicit coefficient matrix after checking its invariants.
    pub fn from_matrix(u: Matrix) -> Result<Self> {
        if u.rows() != u.cols() {
            return Err(Error::ShapeMismatch("weighting matrix must be square".into()));
        }
        for j in 0..u.rows() {
            if u[(j, j)] != -1.0 {
                return Err(Error::InvalidParameter(format!("diagonal entry {j} is not -1")));
            }
            let row = u.row(j);
            let off: Vec<f64> = (0..u.cols()).filter(|&k| k != j).map(|k| row[k]).collect();
            if off.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParameter(format!("row {j} has weights outside [0, 1]")));
            }
            let sum: f64 = off.iter().sum();
            if !off.is_empty() && (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!("row {j} weights sum to {sum}")));
            }
        }
        Ok(Self { u })
    }
}

/// Row-wise softmax over the off-diagonal entries of `W`; the diagonal is
/// excluded from the support and pinned to exactly `-1`.
pub fn materialize_weighting(params: &WeightingParams) -> WeightingMatrix {
    let w = &params.w;
    let k = w.rows();
    let mut u = Matrix::zeros(k, k);
    for j in 0..k {
        let row = w.row(j);
        let max = (0..k)
            .filter(|&m| m != j)
            .map(|m| row[m])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for m in (0..k).filter(|&m| m != j) {
            let e = (row[m] - max).exp();
            u[(j, m)] = e;
            total += e;
        }
        for m in (0..k).filter(|&m| m != j) {
            u[(j, m)] /= total;
        }
        u[(j, j)] = -1.0;
    }
    WeightingMatrix { u }
}

fn check_convex_shapes(u: &WeightingMatrix, t: &SimT) -> Result<()> {
    if u.u.cols() != t.t.rows() {
        return Err(Error::ShapeMismatch(format!(
            "weighting matrix {:?} does not conform to SimT {:?}",
            u.u.shape(),
            t.t.shape()
        )));
    }
    Ok(())
}

/// Squared norm of each row of `uT`: how far each SimT row sits from the
/// convex combination of the others that `u` proposes.
pub fn convex_row_residuals(u: &WeightingMatrix, t: &SimT) -> Result<Vec<f64>> {
    check_convex_shapes(u, t)?;
    Ok(u.u
        .matmul(&t.t)
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect())
}

/// `‖uT‖²` and its gradient with respect to the weighting logits `W`.
pub fn convex_inner_loss(u: &WeightingMatrix, t: &SimT) -> Result<(f64, Matrix)> {
    check_convex_shapes(u, t)?;
    let ut = u.u.matmul(&t.t);
    let loss = ut.frobenius_sq();
    // dL/du = 2 (uT) Tᵀ, then through the off-diagonal softmax.
    let dl_du = ut.matmul_t(&t.t).scale(2.0);
    let k = u.u.rows();
    let mut grad = Matrix::zeros(k, k);
    for j in 0..k {
        let q = u.u.row(j);
        let g = dl_du.row(j);
        let inner: f64 = (0..k).filter(|&m| m != j).map(|m| g[m] * q[m]).sum();
        for m in (0..k).filter(|&m| m != j) {
            grad[(j, m)] = q[m] * (g[m] - inner);
        }
    }
    Ok((loss, grad))
}

/// `-‖uT‖²` and its gradient with respect to `T`, holding `u` fixed.
pub fn convex_outer_loss(u: &WeightingMatrix, t: &SimT) -> Result<(f64, Matrix)> {
    check_convex_shapes(u, t)?;
    let ut = u.u.matmul(&t.t);
    let grad = u.u.t_matmul(&ut).scale(-2.0);
    Ok((-ut.frobenius_sq(), grad))
}
