//! Training protocol: warm-up on pseudo labels, extension of the classifier
//! with open-set outputs, then joint optimization of the classifier and the
//! SimT under the corrected loss and the three regularizers.
//!
//! Optimization is plain SGD with polynomially decayed learning rates. The
//! hidden layer uses `base_lr`; the output layer, `U` and `W` use `head_lr`.
//! Gradient flow follows the objective's argument structure: the corrected
//! loss reaches both the classifier and `T`, the auxiliary loss only the
//! classifier, and the three regularizers only `T`.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    aux_loss, backward, corrected_loss, detect_anchors, forward, forward_cached,
    select_confident, self_training_loss, ClassifierGrads, ClassifierParams, ConfidentSets, Dense,
    PosteriorBatch,
};
use crate::simt::{
    anchor_loss, backprop_simt, convex_inner_loss, convex_outer_loss, convex_row_residuals,
    materialize_simt, materialize_weighting, volume_loss, volume_loss_grad, AnchorSet, SimT,
    SimTParams, WeightingMatrix, WeightingParams,
};
use crate::synth::{class_dist, simt_error, SyntheticDataset};

// Independent RNG streams derived from the run seed.
const STREAM_WARMUP: u64 = 0;
const STREAM_EXTEND: u64 = 1;
const STREAM_SIMT: u64 = 2;
const STREAM_BATCHES: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_true() -> bool {
    true
}

fn default_extension_std() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub closed: usize,
    pub open: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Turns the auxiliary loss on or off as a whole.
    #[serde(default = "default_true")]
    pub use_aux: bool,
    pub tau_high: f64,
    pub tau_low: f64,
    pub base_lr: f64,
    pub head_lr: f64,
    pub lr_power: f64,
    pub warmup_iters: usize,
    pub train_iters: usize,
    pub batch_size: usize,
    pub inner_u_steps: usize,
    /// Iterations during which the corrected loss does not update `T`.
    #[serde(default)]
    pub freeze_simt_iters: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    /// Standard deviation of the appended open-set output weights.
    #[serde(default = "default_extension_std")]
    pub extension_std: f64,
}

impl TrainConfig {
    /// Reference hyper-parameters: `λ = 0.1`, `α = 1`, `β = 1`, `γ = 0.1`,
    /// thresholds 0.8 / 0.2, a 10× head-to-base learning-rate ratio.
    pub fn reference_defaults(closed: usize, open: usize) -> Self {
        Self {
            closed,
            open,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            lambda: 0.1,
            use_aux: true,
            tau_high: 0.8,
            tau_low: 0.2,
            base_lr: 6e-4,
            head_lr: 6e-3,
            lr_power: 0.9,
            warmup_iters: 2000,
            train_iters: 20000,
            batch_size: 256,
            inner_u_steps: 1,
            freeze_simt_iters: 0,
            seed: 0,
            hidden_dim: 32,
            extension_std: 1e-2,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.closed + self.open
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.closed == 0 {
            return bad("closed must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(0.0 < self.tau_low && self.tau_low < self.tau_high && self.tau_high < 1.0) {
            return bad(format!(
                "thresholds must satisfy 0 < tau_low ({}) < tau_high ({}) < 1",
                self.tau_low, self.tau_high
            ));
        }
        if !(self.base_lr > 0.0 && self.head_lr >= self.base_lr && self.head_lr.is_finite()) {
            return bad(format!(
                "learning rates must satisfy 0 < base_lr ({}) <= head_lr ({})",
                self.base_lr, self.head_lr
            ));
        }
        if !(self.lr_power > 0.0 && self.lr_power.is_finite()) {
            return bad(format!("lr_power must be positive, got {}", self.lr_power));
        }
        for (name, v) in [
            ("warmup_iters", self.warmup_iters),
            ("train_iters", self.train_iters),
            ("batch_size", self.batch_size),
            ("inner_u_steps", self.inner_u_steps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.extension_std >= 0.0 && self.extension_std.is_finite()) {
            return bad(format!("extension_std must be nonnegative, got {}", self.extension_std));
        }
        Ok(())
    }
}

/// `base · (1 − iter / max_iter)^power`
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = 1.0 - iter.min(max_iter) as f64 / max_iter as f64;
    base * frac.powf(power)
}

fn sample_batch<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

fn sgd_step(params: &mut ClassifierParams, grads: &ClassifierGrads, base_lr: f64, head_lr: f64) {
    params.head.axpy(-head_lr, &grads.head);
    if let (Some(h), Some(g)) = (&mut params.hidden, &grads.hidden) {
        h.axpy(-base_lr, g);
    }
}

/// Trains a fresh classifier with cross-entropy on the given labels.
///
/// Used for the warm-up model (pseudo labels) and for reference baselines.
pub fn fit_cross_entropy(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    config: &TrainConfig,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierParams> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("training labels"));
    }
    let mut params = ClassifierParams::init(features.cols(), config.hidden_dim, classes, rng);
    for it in 0..iters {
        let idx = sample_batch(labels.len(), config.batch_size, rng);
        let x = features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (post, cache) = forward_cached(&params, &x);
        let (loss, d_logits) = self_training_loss(&post, &y)?;
        let grads = backward(&params, &x, &cache, &d_logits);
        sgd_step(
            &mut params,
            &grads,
            poly_lr(config.base_lr, it, iters, config.lr_power),
            poly_lr(config.head_lr, it, iters, config.lr_power),
        );
        if it % 500 == 0 {
            debug!("cross-entropy iter {it}: loss {loss:.6}");
        }
    }
    params.validate()?;
    Ok(params)
}

/// Trains the `C`-way warm-up model on pseudo labels.
pub fn warmup(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<ClassifierParams> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut rng = stream_rng(config.seed, STREAM_WARMUP);
    fit_cross_entropy(
        &dataset.features,
        &dataset.pseudo_labels,
        config.closed,
        config,
        config.warmup_iters,
        &mut rng,
    )
}

/// Appends `open` output units to a trained classifier. Existing output
/// weights are copied verbatim; new weights are `N(0, std²)` with zero bias.
pub fn extend_classifier(
    warm: &ClassifierParams,
    open: usize,
    std: f64,
    seed: u64,
) -> Result<ClassifierParams> {
    warm.validate()?;
    let mut rng = stream_rng(seed, STREAM_EXTEND);
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let fan_in = warm.head.weight.rows();
    let extra = Matrix::from_fn(fan_in, open, |_, _| normal.sample(&mut rng));
    Ok(ClassifierParams {
        hidden: warm.hidden.clone(),
        head: Dense {
            weight: warm.head.weight.hstack(&extra),
            bias: warm.head.bias.hstack(&Matrix::zeros(1, open)),
        },
    })
}

/// Values of every objective term at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub corrected: f64,
    pub aux: f64,
    pub volume: f64,
    pub anchor: f64,
    pub convex: f64,
    pub total: f64,
}

/// Per-term gradients with respect to `T`, kept apart so their flow can be
/// gated and checked term by term.
#[derive(Clone, Debug)]
pub struct SimTGrads {
    pub corrected: Matrix,
    pub volume: Matrix,
    pub anchor: Matrix,
    pub convex: Matrix,
}

impl SimTGrads {
    /// `[dL_LC/dT] + α dL_vol/dT + β dL_anchor/dT + γ dL_convex/dT`
    pub fn combine(&self, config: &TrainConfig, include_corrected: bool) -> Matrix {
        let mut total = if include_corrected {
            self.corrected.clone()
        } else {
            Matrix::zeros(self.corrected.rows(), self.corrected.cols())
        };
        total.axpy(config.alpha, &self.volume);
        total.axpy(config.beta, &self.anchor);
        total.axpy(config.gamma, &self.convex);
        total
    }
}

/// Everything one evaluation of the objective produces on a batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub losses: LossTerms,
    pub classifier: ClassifierGrads,
    pub simt: SimTGrads,
    pub anchors: AnchorSet,
    pub confident: ConfidentSets,
}

/// Which classes occur in a batch: closed classes through the pseudo
/// labels, open slots through the current model's argmax.
pub fn occurring_classes(post_w: &PosteriorBatch, pseudo: &[usize], closed: usize) -> Vec<bool> {
    let mut occurring = vec![false; post_w.classes()];
    for &y in pseudo {
        occurring[y] = true;
    }
    for i in 0..post_w.len() {
        let k = post_w.argmax(i);
        if k >= closed {
            occurring[k] = true;
        }
    }
    occurring
}

/// Evaluates the full objective and all its gradients on one batch.
pub fn objective(
    config: &TrainConfig,
    model: &ClassifierParams,
    fixed: &ClassifierParams,
    t: &SimT,
    u: &WeightingMatrix,
    x: &Matrix,
    pseudo: &[usize],
) -> Result<Objective> {
    let post_fixed = forward(fixed, x);
    let (post_w, cache) = forward_cached(model, x);

    let occurring = occurring_classes(&post_w, pseudo, config.closed);
    let anchors = detect_anchors(&post_w, &post_fixed, &occurring)?;

    let lc = corrected_loss(&post_w, t, pseudo)?;
    let mut d_logits = lc.d_logits;
    let (aux, confident) = if config.use_aux {
        let sets = select_confident(&post_fixed, &post_w, config.tau_high, config.tau_low)?;
        let (value, d) = aux_loss(&post_w, &sets, config.lambda, t.closed(), t.open())?;
        d_logits.axpy(1.0, &d);
        (value, sets)
    } else {
        (0.0, ConfidentSets::default())
    };
    let classifier = backward(model, x, &cache, &d_logits);

    let volume = volume_loss(t)?;
    let volume_grad = volume_loss_grad(t)?;
    let (anchor, anchor_grad) = anchor_loss(t, &anchors)?;
    let (convex, convex_grad) = convex_outer_loss(u, t)?;

    let total = lc.value + aux + config.alpha * volume + config.beta * anchor + config.gamma * convex;
    Ok(Objective {
        losses: LossTerms {
            corrected: lc.value,
            aux,
            volume,
            anchor,
            convex,
            total,
        },
        classifier,
        simt: SimTGrads {
            corrected: lc.d_t,
            volume: volume_grad,
            anchor: anchor_grad,
            convex: convex_grad,
        },
        anchors,
        confident,
    })
}

/// Serializable position of the batch-sampling generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::InvalidParameter("malformed RNG state".into());
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Complete mutable state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Frozen warm-up model.
    pub fixed: ClassifierParams,
    /// Extended `(C+n)`-way model being trained.
    pub model: ClassifierParams,
    pub simt: SimTParams,
    pub weighting: WeightingParams,
    /// Completed training steps.
    pub iter: usize,
    pub last_losses: LossTerms,
    pub rng: ChaCha8Rng,
}

/// What one call to [`TrainState::step`] did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossTerms,
    /// Inner convex loss before each inner step and after the last.
    pub inner_losses: Vec<f64>,
    pub head_lr: f64,
}

impl TrainState {
    /// Warm-up, classifier extension and parameter initialization.
    pub fn initialize(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if dataset.spec.closed != config.closed {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} closed classes, config {}",
                dataset.spec.closed, config.closed
            )));
        }
        info!("warm-up: {} iterations", config.warmup_iters);
        let fixed = warmup(dataset, config)?;
        Self::from_warmup(dataset, config, fixed)
    }

    /// Builds the training state around an already trained warm-up model.
    pub fn from_warmup(
        dataset: &SyntheticDataset,
        config: &TrainConfig,
        fixed: ClassifierParams,
    ) -> Result<Self> {
        config.validate()?;
        if fixed.output_dim() != config.closed || fixed.input_dim() != dataset.spec.dim {
            return Err(Error::ShapeMismatch("warm-up model does not match the dataset".into()));
        }
        let model = extend_classifier(&fixed, config.open, config.extension_std, config.seed)?;
        let dist = class_dist(&dataset.pseudo_labels, config.closed)?;
        let simt = SimTParams::init(
            config.closed,
            config.open,
            dist,
            &mut stream_rng(config.seed, STREAM_SIMT),
        )?;
        Ok(Self {
            config: config.clone(),
            fixed,
            model,
            simt,
            weighting: WeightingParams::uniform(config.total_classes()),
            iter: 0,
            last_losses: LossTerms::default(),
            rng: stream_rng(config.seed, STREAM_BATCHES),
        })
    }

    pub fn head_lr(&self) -> f64 {
        let c = &self.config;
        poly_lr(c.head_lr, self.iter, c.train_iters, c.lr_power)
    }

    pub fn base_lr(&self) -> f64 {
        let c = &self.config;
        poly_lr(c.base_lr, self.iter, c.train_iters, c.lr_power)
    }

    pub fn simt(&self) -> Result<SimT> {
        materialize_simt(&self.simt)
    }

    pub fn weighting(&self) -> WeightingMatrix {
        materialize_weighting(&self.weighting)
    }

    /// Samples a batch from `dataset` and takes one step on it.
    pub fn step(&mut self, dataset: &SyntheticDataset) -> Result<StepReport> {
        let idx = sample_batch(dataset.len(), self.config.batch_size, &mut self.rng);
        let x = dataset.features.select_rows(&idx);
        let pseudo: Vec<usize> = idx.iter().map(|&i| dataset.pseudo_labels[i]).collect();
        self.train_step(&x, &pseudo)
    }

    /// One alternating step on a given batch: inner descent on `W` with `T`
    /// fixed, then a joint descent step on the classifier and `U`.
    pub fn train_step(&mut self, x: &Matrix, pseudo: &[usize]) -> Result<StepReport> {
        let iteration = self.iter;
        let at = |e: Error| Error::Training {
            iteration,
            source: Box::new(e),
        };
        let (base_lr, head_lr) = (self.base_lr(), self.head_lr());
        let t = self.simt().map_err(at)?;

        let mut inner_losses = Vec::with_capacity(self.config.inner_u_steps + 1);
        for _ in 0..self.config.inner_u_steps {
            let u = self.weighting();
                let (loss, grad) = convex_inner_loss(&u, &t).map_err(at)?;
            inner_losses.push(loss);
            self.weighting.w.axpy(-head_lr, &grad);
        }
        let u = self.weighting();
        inner_losses.push(convex_inner_loss(&u, &t).map_err(at)?.0);

        let obj = objective(&self.config, &self.model, &self.fixed, &t, &u, x, pseudo).map_err(at)?;
        let include_corrected = self.iter >= self.config.freeze_simt_iters;
        let d_t = obj.simt.combine(&self.config, include_corrected);
        let d_u = backprop_simt(&self.simt, &d_t).map_err(at)?;

        sgd_step(&mut self.model, &obj.classifier, base_lr, head_lr);
        self.simt.u.axpy(-head_lr, &d_u);
        if !self.model.head.weight.is_finite() || !self.simt.u.is_finite() {
            return Err(at(Error::NonFinite("parameters diverged".into())));
        }
        self.iter += 1;
        self.last_losses = obj.losses;
        Ok(StepReport {
            losses: obj.losses,
            inner_losses,
            head_lr,
        })
    }

    /// Runs steps until `train_iters`, evaluating every `eval_every` steps
    /// and after the last one.
    pub fn run(
        &mut self,
        dataset: &SyntheticDataset,
        heldout: &SyntheticDataset,
        eval_every: usize,
        mut on_eval: impl FnMut(&TrainState, &MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iter < self.config.train_iters {
            self.step(dataset)?;
            let done = self.iter == self.config.train_iters;
            if done || (eval_every > 0 && self.iter % eval_every == 0) {
                let record = evaluate(self, heldout)?;
                debug!(
                    "iter {}: total {:.5} closed_mae {:.4} open_mae {:.4} acc {:.4} f1 {:.4}",
                    record.iteration,
                    record.loss_total,
                    record.closed_mae,
                    record.open_mae,
                    record.accuracy,
                    record.open_f1
                );
                on_eval(self, &record)?;
            }
        }
        Ok(())
    }
}

/// Metrics logged at each evaluation; field order is the `metrics.csv`
/// column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss_corrected: f64,
    pub loss_aux: f64,
    pub loss_volume: f64,
    pub loss_anchor: f64,
    pub loss_convex: f64,
    pub loss_total: f64,
    pub closed_mae: f64,
    pub open_mae: f64,
    pub accuracy: f64,
    pub open_precision: f64,
    pub open_recall: f64,
    pub open_f1: f64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 14] = [
        "iteration",
        "lr",
        "loss_corrected",
        "loss_aux",
        "loss_volume",
        "loss_anchor",
        "loss_convex",
        "loss_total",
        "closed_mae",
        "open_mae",
        "accuracy",
        "open_precision",
        "open_recall",
        "open_f1",
    ];

    pub fn values(&self) -> [f64; 13] {
        [
            self.lr,
            self.loss_corrected,
            self.loss_aux,
            self.loss_volume,
            self.loss_anchor,
            self.loss_convex,
            self.loss_total,
            self.closed_mae,
            self.open_mae,
            self.accuracy,
            self.open_precision,
            self.open_recall,
            self.open_f1,
        ]
    }
}

/// Open-set detection counts against clean labels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn detection_scores(predicted: &[bool], actual: &[bool]) -> DetectionScores {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    DetectionScores {
        precision,
        recall,
        f1,
    }
}

/// Accuracy of a classifier's leading `C` outputs on instances whose clean
/// label is a closed class.
pub fn closed_accuracy(params: &ClassifierParams, closed: usize, data: &SyntheticDataset) -> f64 {
    let post = forward(params, &data.features);
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, &y) in data.clean_labels.iter().enumerate() {
        if y < closed {
            total += 1;
            if post.argmax_leading(i, closed) == y {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Open-set detection of a classifier: positive iff its argmax is an open slot.
pub fn open_detection(params: &ClassifierParams, closed: usize, data: &SyntheticDataset) -> DetectionScores {
    let post = forward(params, &data.features);
    let predicted: Vec<bool> = (0..post.len()).map(|i| post.argmax(i) >= closed).collect();
    let actual: Vec<bool> = data.clean_labels.iter().map(|&y| y >= closed).collect();
    detection_scores(&predicted, &actual)
}

pub fn evaluate(state: &TrainState, heldout: &SyntheticDataset) -> Result<MetricsRecord> {
    if heldout.is_empty() {
        return Err(Error::EmptyInput("held-out dataset"));
    }
    let closed = state.config.closed;
    if heldout.spec.closed != closed || heldout.spec.dim != state.model.input_dim() {
        return Err(Error::ShapeMismatch(
            "held-out data does not match the trained model".into(),
        ));
    }
    let t = state.simt()?;
    let err = simt_error(&t, &heldout.spec.t_true)?;
    let detection = open_detection(&state.model, closed, heldout);
    let l = &state.last_losses;
    Ok(MetricsRecord {
        iteration: state.iter,
        lr: state.head_lr(),
        loss_corrected: l.corrected,
        loss_aux: l.aux,
        loss_volume: l.volume,
        loss_anchor: l.anchor,
        loss_convex: l.convex,
        loss_total: l.total,
        closed_mae: err.closed_mae,
        open_mae: err.open_mae,
        accuracy: closed_accuracy(&state.model, closed, heldout),
        open_precision: detection.precision,
        open_recall: detection.recall,
        open_f1: detection.f1,
    })
}

/// Approximates `min_u ‖uT‖²` by descent on `W` from uniform weights.
pub fn min_convex_residual(t: &SimT, steps: usize, lr: f64) -> Result<f64> {
    let mut params = WeightingParams::uniform(t.total_classes());
    for _ in 0..steps {
        let u = materialize_weighting(&params);
        let (_, grad) = convex_inner_loss(&u, t)?;
        params.w.axpy(-lr, &grad);
    }
    Ok(convex_row_residuals(&materialize_weighting(&params), t)?.iter().sum())
}
