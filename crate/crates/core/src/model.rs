//! A small per-instance classifier and the losses trained through it.
//!
//! The network is `affine → ReLU → affine → softmax` (or a single affine
//! layer when the hidden width is zero). All gradients are derived by hand;
//! losses return their gradient with respect to the logits and
//! [`backward`] carries it into the parameters.
//!
//! Class indices are zero-based throughout: closed classes are `0..C`, open
//! slots `C..C+n`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::simt::{AnchorSet, SimT};

/// Smallest corrected probability accepted before reporting underflow.
pub const PROB_FLOOR: f64 = 1e-300;

/// An affine layer `x ↦ x W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Matrix::from_fn(inputs, outputs, |_, _| normal.sample(rng)),
            bias: Matrix::zeros(1, outputs),
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        let b = self.bias.row(0);
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Dense) {
        self.weight.axpy(s, &other.weight);
        self.bias.axpy(s, &other.bias);
    }
}

/// Weights of the classifier. `hidden` is `None` for a single affine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub hidden: Option<Dense>,
    pub head: Dense,
}

/// Gradients share the parameter layout.
pub type ClassifierGrads = ClassifierParams;

impl ClassifierParams {
    /// He-normal hidden weights, `N(0, 1/h)` head weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        if hidden_dim == 0 {
            return Self {
                hidden: None,
                head: Dense::init(input_dim, output_dim, (1.0 / input_dim as f64).sqrt(), rng),
            };
        }
        let hidden = Dense::init(input_dim, hidden_dim, (2.0 / input_dim as f64).sqrt(), rng);
        let head = Dense::init(hidden_dim, output_dim, (1.0 / hidden_dim as f64).sqrt(), rng);
        Self {
            hidden: Some(hidden),
            head,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        if hidden_dim == 0 {
            Self {
                hidden: None,
                head: Dense::zeros(input_dim, output_dim),
            }
        } else {
            Self {
                hidden: Some(Dense::zeros(input_dim, hidden_dim)),
                head: Dense::zeros(hidden_dim, output_dim),
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weight.rows(),
            None => self.head.weight.rows(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.weight.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.head.weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let h_out = match &self.hidden {
            Some(h) => {
                if h.bias.shape() != (1, h.weight.cols()) {
                    return Err(Error::ShapeMismatch("hidden bias".into()));
                }
                h.weight.cols()
            }
            None => self.head.weight.rows(),
        };
        if self.head.weight.rows() != h_out || self.head.bias.shape() != (1, self.output_dim()) {
            return Err(Error::ShapeMismatch("classifier head".into()));
        }
        if !self.head.is_finite() || !self.hidden.as_ref().is_none_or(Dense::is_finite) {
            return Err(Error::NonFinite("classifier parameters".into()));
        }
        Ok(())
    }

    /// `self += s · grads`
    pub fn axpy(&mut self, s: f64, grads: &ClassifierGrads) {
        self.head.axpy(s, &grads.head);
        if let (Some(h), Some(g)) = (&mut self.hidden, &grads.hidden) {
            h.axpy(s, g);
        }
    }
}

/// Row-wise softmax outputs with the logits they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch {
    pub probs: Matrix,
    pub logits: Matrix,
}

impl PosteriorBatch {
    pub fn from_logits(logits: Matrix) -> Self {
        let mut probs = logits.clone();
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Self { probs, logits }
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.probs.row(i))
    }

    /// Argmax restricted to the leading `k` classes.
    pub fn argmax_leading(&self, i: usize, k: usize) -> usize {
        argmax(&self.probs.row(i)[..k])
    }

    pub fn max_prob(&self, i: usize) -> f64 {
        self.probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    hidden_out: Option<Matrix>,
}

pub fn forward(params: &ClassifierParams, x: &Matrix) -> PosteriorBatch {
    forward_cached(params, x).0
}

pub fn forward_cached(params: &ClassifierParams, x: &Matrix) -> (PosteriorBatch, ForwardCache) {
    assert_eq!(x.cols(), params.input_dim(), "feature dimension mismatch");
    match &params.hidden {
        Some(hidden) => {
            let act = hidden.apply(x).map(|v| v.max(0.0));
            let logits = params.head.apply(&act);
            (
                PosteriorBatch::from_logits(logits),
                ForwardCache {
                    hidden_out: Some(act),
                },
            )
        }
        None => (
            PosteriorBatch::from_logits(params.head.apply(x)),
            ForwardCache { hidden_out: None },
        ),
    }
}

/// Backpropagates `dL/dlogits` into every parameter.
pub fn backward(
    params: &ClassifierParams,
    x: &Matrix,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> ClassifierGrads {
    let head_in = cache.hidden_out.as_ref().unwrap_or(x);
    let head = Dense {
        weight: head_in.t_matmul(d_logits),
        bias: d_logits.col_sums(),
    };
    let hidden = match (&params.hidden, &cache.hidden_out) {
        (Some(_), Some(act)) => {
            let mut d_act = d_logits.matmul_t(&params.head.weight);
            for (d, a) in d_act.as_mut_slice().iter_mut().zip(act.as_slice()) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            Some(Dense {
                weight: x.t_matmul(&d_act),
                bias: d_act.col_sums(),
            })
        }
        _ => None,
    };
    ClassifierGrads { hidden, head }
}

/// Converts `dL/dp` into `dL/dz` through the softmax Jacobian.
fn softmax_backward(probs: &[f64], d_probs: &[f64], out: &mut [f64]) {
    let inner: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    for ((o, p), g) in out.iter_mut().zip(probs).zip(d_probs) {
        *o = p * (g - inner);
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} instances",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} outside 0..{classes}"
        )));
    }
    Ok(())
}

/// Value and gradients of the transition-corrected cross-entropy.
#[derive(Clone, Debug)]
pub struct CorrectedLoss {
    pub value: f64,
    pub d_logits: Matrix,
    pub d_t: Matrix,
}

/// Mean over instances of `−log (p T)_ỹ`.
pub fn corrected_loss(post: &PosteriorBatch, t: &SimT, pseudo: &[usize]) -> Result<CorrectedLoss> {
    let tm = t.matrix();
    let (n, k) = post.probs.shape();
    if k != tm.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{k} posterior classes against a SimT with {} rows",
            tm.rows()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("posterior batch"));
    }
    check_labels(pseudo, n, tm.cols())?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_logits = Matrix::zeros(n, k);
    let mut d_t = Matrix::zeros(tm.rows(), tm.cols());
    for (i, &y) in pseudo.iter().enumerate() {
        let p = post.probs.row(i);
        let s: f64 = p.iter().enumerate().map(|(j, pj)| pj * tm[(j, y)]).sum();
        if !(s >= PROB_FLOOR) {
            return Err(Error::NumericalUnderflow { instance: i, value: s });
        }
        value -= s.ln();
        let dz = d_logits.row_mut(i);
        for j in 0..k {
            dz[j] = inv_n * p[j] * (1.0 - tm[(j, y)] / s);
            d_t[(j, y)] -= inv_n * p[j] / s;
        }
    }
    Ok(CorrectedLoss {
        value: value * inv_n,
        d_logits,
        d_t,
    })
}

/// Mean cross-entropy against hard labels, with `dL/dlogits`.
pub fn self_training_loss(post: &PosteriorBatch, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, k) = post.probs.shape();
    if n == 0 {
        return Err(Error::EmptyInput("posterior batch"));
    }
    check_labels(labels, n, k)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_logits = post.probs.scale(inv_n);
    for (i, &y) in labels.iter().enumerate() {
        value -= log_softmax_at(post.logits.row(i), y);
        d_logits[(i, y)] -= inv_n;
    }
    Ok((value * inv_n, d_logits))
}

/// `log softmax(z)_y` computed from logits.
fn log_softmax_at(z: &[f64], y: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z[y] - lse
}

/// Per-class anchor instance: the first instance maximizing the class's
/// clean posterior, for classes flagged as occurring.
pub fn anchor_indices(post_w: &PosteriorBatch, occurring: &[bool]) -> Vec<Option<usize>> {
    assert_eq!(occurring.len(), post_w.classes(), "occurrence mask length");
    (0..post_w.classes())
        .map(|c| {
            if !occurring[c] || post_w.is_empty() {
                return None;
            }
            let mut best = 0;
            for i in 1..post_w.len() {
                if post_w.probs[(i, c)] > post_w.probs[(best, c)] {
                    best = i;
                }
            }
            Some(best)
        })
        .collect()
}

/// Finds each occurring class's anchor with the current model and reads its
/// noisy posterior from the frozen warm-up model.
pub fn detect_anchors(
    post_w: &PosteriorBatch,
    post_fixed: &PosteriorBatch,
    occurring: &[bool],
) -> Result<AnchorSet> {
    if post_w.len() != post_fixed.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} current posteriors vs {} warm-up posteriors",
            post_w.len(),
            post_fixed.len()
        )));
    }
    if occurring.len() != post_w.classes() {
        return Err(Error::ShapeMismatch("occurrence mask length".into()));
    }
    let mut anchors = AnchorSet::empty(post_w.classes(), post_fixed.classes());
    for (c, idx) in anchor_indices(post_w, occurring).into_iter().enumerate() {
        if let Some(i) = idx {
            anchors.posteriors.row_mut(c).copy_from_slice(post_fixed.probs.row(i));
            anchors.present[c] = true;
        }
    }
    Ok(anchors)
}

/// Confidently labeled instances: `(instance, label)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfidentSets {
    pub closed: Vec<(usize, usize)>,
    pub open: Vec<(usize, usize)>,
}

impl ConfidentSets {
    pub fn is_empty(&self) -> bool {
        self.closed.is_empty() && self.open.is_empty()
    }
}

/// Warm-up max-probability above `tau_high` selects a closed instance
/// labeled by the warm-up argmax; below `tau_low` with an open-slot argmax
/// under the current model selects an open instance labeled by that argmax.
pub fn select_confident(
    post_fixed: &PosteriorBatch,
    post_w: &PosteriorBatch,
    tau_high: f64,
    tau_low: f64,
) -> Result<ConfidentSets> {
    if !(0.0 < tau_low && tau_low < tau_high && tau_high < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "thresholds must satisfy 0 < {tau_low} < {tau_high} < 1"
        )));
    }
    if post_w.len() != post_fixed.len() {
        return Err(Error::ShapeMismatch("batches index different instances".into()));
    }
    let closed_classes = post_fixed.classes();
    let mut sets = ConfidentSets::default();
    for i in 0..post_fixed.len() {
        let conf = post_fixed.max_prob(i);
        if conf > tau_high {
            sets.closed.push((i, post_fixed.argmax(i)));
        } else if conf < tau_low {
            let label = post_w.argmax(i);
            if label >= closed_classes {
                sets.open.push((i, label));
            }
        }
    }
    Ok(sets)
}

/// Confident-set cross-entropy plus `λ` times the masked open-slot term.
///
/// The second term removes each closed instance's label from the support,
/// re-normalizes the remaining logits, and scores the most probable open
/// slot. Both terms are means over their contributing instances.
pub fn aux_loss(
    post_w: &PosteriorBatch,
    sets: &ConfidentSets,
    lambda: f64,
    closed: usize,
    open: usize,
) -> Result<(f64, Matrix)> {
    let (n, k) = post_w.probs.shape();
    if k != closed + open {
        return Err(Error::ShapeMismatch(format!(
            "{k} posterior classes, expected {}",
            closed + open
        )));
    }
    for &(i, y) in &sets.closed {
        if i >= n || y >= closed {
            return Err(Error::InvalidParameter(format!("closed pair ({i}, {y})")));
        }
    }
    for &(i, y) in &sets.open {
        if i >= n || y < closed || y >= k {
            return Err(Error::InvalidParameter(format!("open pair ({i}, {y})")));
        }
    }
    let mut d_logits = Matrix::zeros(n, k);
    let mut value = 0.0;

    let supervised = sets.closed.len() + sets.open.len();
    if supervised > 0 {
        let w = 1.0 / supervised as f64;
        for &(i, y) in sets.closed.iter().chain(&sets.open) {
            value -= w * log_softmax_at(post_w.logits.row(i), y);
            let p = post_w.probs.row(i);
            let d = d_logits.row_mut(i);
            for j in 0..k {
                d[j] += w * p[j];
            }
            d[y] -= w;
        }
    }

    if lambda != 0.0 && open > 0 && !sets.closed.is_empty() {
        let w = lambda / sets.closed.len() as f64;
        let mut masked = vec![0.0; k];
        for &(i, y) in &sets.closed {
            let target = closed + argmax(&post_w.probs.row(i)[closed..]);
            let z = post_w.logits.row(i);
            let max = (0..k)
                .filter(|&j| j != y)
                .map(|j| z[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..k).filter(|&j| j != y) {
                masked[j] = (z[j] - max).exp();
                total += masked[j];
            }
            value -= w * ((z[target] - max) - total.ln());
            let d = d_logits.row_mut(i);
            for j in (0..k).filter(|&j| j != y) {
                d[j] += w * masked[j] / total;
            }
            d[target] -= w;
        }
    }
    Ok((value, d_logits))
}

/// `dL/dlogits` for a loss expressed in terms of the probabilities.
pub fn probs_to_logits_grad(post: &PosteriorBatch, d_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(post.len(), post.classes());
    for i in 0..post.len() {
        softmax_backward(post.probs.row(i), d_probs.row(i), out.row_mut(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{fd_gradient, max_rel_error, FD_EPS};

    fn batch(logits: &[&[f64]]) -> PosteriorBatch {
        PosteriorBatch::from_logits(Matrix::from_rows(logits).unwrap())
    }

    fn probs_batch(probs: &[&[f64]]) -> PosteriorBatch {
        let p = Matrix::from_rows(probs).unwrap();
        PosteriorBatch {
            logits: p.map(f64::ln),
            probs: p,
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let params = ClassifierParams::zeros(3, 4, 5);
        let x = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let post = forward(&params, &x);
        assert!(post.probs.as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn saturated_single_layer() {
        let mut params = ClassifierParams::zeros(3, 0, 3);
        params.head.weight = Matrix::identity(3);
        let x = Matrix::from_rows(&[[0.0, 40.0, 0.0]]).unwrap();
        let post = forward(&params, &x);
        assert!(post.probs[(0, 1)] > 1.0 - 1e-16);
    }

    #[test]
    fn corrected_loss_hand_value() {
        let post = probs_batch(&[&[1.0, 0.0, 0.0]]);
        let t = SimT::from_matrix(
            Matrix::from_rows(&[[5.0 / 6.0, 1.0 / 6.0], [1.0 / 6.0, 5.0 / 6.0], [0.5, 0.5]]).unwrap(),
            2,
        )
        .unwrap();
        let out = corrected_loss(&post, &t, &[1]).unwrap();
        assert!((out.value - 1.791759).abs() < 1e-6);
        assert!((out.value + (1.0f64 / 6.0).ln()).abs() < 1e-15);
        assert!(out.value >= 0.0);
    }

    #[test]
    fn corrected_loss_identity_is_cross_entropy() {
        let post = batch(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7]]);
        let t = SimT::from_matrix(Matrix::identity(3), 3).unwrap();
        let lc = corrected_loss(&post, &t, &[2, 0]).unwrap();
        let (st, d) = self_training_loss(&post, &[2, 0]).unwrap();
        assert!((lc.value - st).abs() < 1e-12);
        assert!(lc.d_logits.sub(&d).max_abs() < 1e-12);
    }

    #[test]
    fn corrected_loss_underflow() {
        let post = probs_batch(&[&[1.0, 0.0]]);
        let t = SimT::from_matrix(Matrix::identity(2), 2).unwrap();
        assert!(matches!(
            corrected_loss(&post, &t, &[1]),
            Err(Error::NumericalUnderflow { instance: 0, .. })
        ));
    }

    #[test]
    fn self_training_examples() {
        let post = batch(&[&[0.0; 4], &[0.0; 4]]);
        let (v, _) = self_training_loss(&post, &[0, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.386294).abs() < 1e-6);

        let post = batch(&[&[800.0, 0.0, 0.0]]);
        assert_eq!(self_training_loss(&post, &[0]).unwrap().0, 0.0);
        assert!(self_training_loss(&post, &[3]).is_err());
    }

    #[test]
    fn anchors_examples() {
        let post_w = probs_batch(&[&[0.5, 0.2, 0.3], &[0.05, 0.9, 0.05], &[0.05, 0.9, 0.05]]);
        let post_fixed = probs_batch(&[&[0.6, 0.4], &[0.3, 0.7], &[0.2, 0.8]]);
        let anchors = detect_anchors(&post_w, &post_fixed, &[true, true, false]).unwrap();
        assert_eq!(anchors.present, vec![true, true, false]);
        assert_eq!(anchors.posteriors.row(0), &[0.6, 0.4]);
        assert_eq!(anchors.posteriors.row(1), &[0.3, 0.7]);

        let none = detect_anchors(&post_w, &post_fixed, &[false; 3]).unwrap();
        assert_eq!(none.present, vec![false; 3]);

        let tie = probs_batch(&[&[0.8, 0.2], &[0.1, 0.9], &[0.1, 0.9]]);
        assert_eq!(anchor_indices(&tie, &[false, true]), vec![None, Some(1)]);
    }

    #[test]
    fn confident_examples() {
        let fixed = probs_batch(&[&[0.9, 0.1], &[0.5, 0.5]]);
        let w = probs_batch(&[&[0.5, 0.3, 0.2], &[0.2, 0.2, 0.6]]);
        let sets = select_confident(&fixed, &w, 0.8, 0.2).unwrap();
        assert_eq!(sets.closed, vec![(0, 0)]);
        assert!(sets.open.is_empty());

        // C = 6: a flat warm-up row (max < 0.2) whose extended argmax is the
        // second open slot lands in the open set with that label.
        let fixed = probs_batch(&[&[0.15, 0.15, 0.15, 0.15, 0.15, 0.25], &[0.17, 0.17, 0.17, 0.17, 0.16, 0.16]]);
        let w = probs_batch(&[
            &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3],
            &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3],
        ]);
        let sets = select_confident(&fixed, &w, 0.8, 0.2).unwrap();
        let brute: Vec<(usize, usize)> = (0..2)
            .filter(|&i| fixed.max_prob(i) < 0.2 && w.argmax(i) >= 6)
            .map(|i| (i, w.argmax(i)))
            .collect();
        assert!(sets.closed.is_empty());
        assert_eq!(sets.open, vec![(1, 7)]);
        assert_eq!(sets.open, brute);

        assert!(select_confident(&w, &w, 0.2, 0.8).is_err());
    }

    #[test]
    fn aux_empty_and_lambda_zero() {
        let post = batch(&[&[0.1, 0.2, 0.3, 0.4]]);
        let (v, d) = aux_loss(&post, &ConfidentSets::default(), 0.1, 2, 2).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(d, Matrix::zeros(1, 4));

        let sets = ConfidentSets {
            closed: vec![(0, 1)],
            open: vec![],
        };
        let (v, d) = aux_loss(&post, &sets, 0.0, 2, 2).unwrap();
        let (ce, dce) = self_training_loss(&post, &[1]).unwrap();
        assert!((v - ce).abs() < 1e-15);
        assert!(d.sub(&dce).max_abs() < 1e-15);
    }

    #[test]
    fn aux_masked_term_by_enumeration() {
        let (a, b, c, d) = (2.0, 0.5, -0.3, 0.1);
        let post = batch(&[&[a, b, c, d]]);
        let sets = ConfidentSets {
            closed: vec![(0, 0)],
            open: vec![],
        };
        let lambda = 0.7;
        let (v, _) = aux_loss(&post, &sets, lambda, 2, 2).unwrap();
        let (ce, _) = self_training_loss(&post, &[0]).unwrap();
        // Open slot 3 (logit d) beats slot 2; masked support is {b, c, d}.
        let term2 = -(d - (b.exp() + c.exp() + d.exp()).ln());
        assert!((v - (ce + lambda * term2)).abs() < 1e-12);
    }

    #[test]
    fn aux_gradient_matches_finite_differences() {
        let z = Matrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin() * 2.0);
        let sets = ConfidentSets {
            closed: vec![(0, 1), (2, 0)],
            open: vec![(1, 4)],
        };
        let post = PosteriorBatch::from_logits(z.clone());
        let (_, analytic) = aux_loss(&post, &sets, 0.3, 3, 2).unwrap();
        let numeric = fd_gradient(
            |x| aux_loss(&PosteriorBatch::from_logits(x.clone()), &sets, 0.3, 3, 2).unwrap().0,
            &z,
            FD_EPS,
        )
        .unwrap();
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }
}
