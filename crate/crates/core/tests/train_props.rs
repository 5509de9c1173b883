use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simt_core::model::{aux_loss, corrected_loss, self_training_loss, ClassifierParams, ConfidentSets, PosteriorBatch};
use simt_core::simt::{materialize_simt, materialize_weighting, SimT, SimTParams, WeightingParams};
use simt_core::synth::{generate, GroundTruthSpec, SyntheticDataset};
use simt_core::train::{evaluate, objective, TrainConfig, TrainState};
use simt_core::Matrix;

fn batch() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
    (1usize..=6, 1usize..=12).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(-20.0f64..20.0, n * k),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(z, y)| (Matrix::from_vec(n, k, z).unwrap(), y))
    })
}

fn small_config() -> TrainConfig {
    TrainConfig {
        warmup_iters: 30,
        train_iters: 40,
        batch_size: 32,
        hidden_dim: 6,
        base_lr: 0.05,
        head_lr: 0.5,
        tau_high: 0.65,
        tau_low: 0.55,
        ..TrainConfig::reference_defaults(3, 2)
    }
}

fn small_data(seed: u64) -> SyntheticDataset {
    generate(&GroundTruthSpec::toy(4.0), 400, seed).unwrap()
}

fn random_simt(seed: u64) -> (SimT, simt_core::simt::WeightingMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SimTParams::init(3, 2, vec![0.3, 0.3, 0.4], &mut rng).unwrap();
    let mut weighting = WeightingParams::uniform(5);
    weighting.w = Matrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3 + seed as usize) % 5) as f64 - 2.0);
    (materialize_simt(&params).unwrap(), materialize_weighting(&weighting))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn identity_transition_reduces_to_self_training((logits, labels) in batch()) {
        let k = logits.cols();
        let post = PosteriorBatch::from_logits(logits);
        let t = SimT::from_matrix(Matrix::identity(k), k).unwrap();
        let corrected = corrected_loss(&post, &t, &labels).unwrap();
        let (plain, d_plain) = self_training_loss(&post, &labels).unwrap();
        prop_assert!((corrected.value - plain).abs() <= 1e-12 * plain.abs().max(1.0), "{} vs {plain}", corrected.value);
        prop_assert!(corrected.d_logits.sub(&d_plain).max_abs() <= 1e-12);
    }

    #[test]
    fn empty_confident_sets_give_zero_aux((logits, _) in batch(), lambda in 0.0f64..10.0, open in 0usize..=2) {
        let k = logits.cols();
        prop_assume!(k > open);
        let post = PosteriorBatch::from_logits(logits);
        let (value, grad) = aux_loss(&post, &ConfidentSets::default(), lambda, k - open, open).unwrap();
        prop_assert_eq!(value, 0.0);
        prop_assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    /// The SimT gradient is the weighted sum of the per-term gradients.
    #[test]
    fn simt_gradient_is_linear_in_the_weights(
        alpha in 0.0f64..5.0,
        beta in 0.0f64..5.0,
        gamma in 0.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let (t, u) = random_simt(seed);
        let data = small_data(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ClassifierParams::init(8, 6, 5, &mut rng);
        let fixed = ClassifierParams::init(8, 6, 3, &mut rng);
        let config = TrainConfig { alpha, beta, gamma, ..small_config() };
        let idx: Vec<usize> = (0..32).collect();
        let x = data.features.select_rows(&idx);
        let obj = objective(&config, &model, &fixed, &t, &u, &x, &data.pseudo_labels[..32]).unwrap();
        let g = &obj.simt;
        let combined = g.combine(&config, true);
        let mut expected = g.corrected.clone();
        expected.axpy(alpha, &g.volume);
        expected.axpy(beta, &g.anchor);
        expected.axpy(gamma, &g.convex);
        prop_assert!(combined.sub(&expected).max_abs() <= 1e-10 * expected.max_abs().max(1.0));
        let regularizers_only = g.combine(&config, false);
        let mut sum = g.corrected.scale(0.0);
        sum.axpy(1.0, &combined);
        sum.axpy(-1.0, &g.corrected);
        prop_assert!(regularizers_only.sub(&sum).max_abs() <= 1e-10 * sum.max_abs().max(1.0));
    }
}

/// Regularizer weights never touch the classifier; the auxiliary loss never
/// touches `T`.
#[test]
fn gradient_flow_is_isolated() {
    let (t, u) = random_simt(3);
    let data = small_data(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ClassifierParams::init(8, 6, 5, &mut rng);
    let fixed = ClassifierParams::init(8, 6, 3, &mut rng);
    let idx: Vec<usize> = (0..64).collect();
    let x = data.features.select_rows(&idx);
    let y = &data.pseudo_labels[..64];

    let base = small_config();
    let heavy = TrainConfig {
        alpha: 7.0,
        beta: 3.0,
        gamma: 5.0,
        ..base.clone()
    };
    let a = objective(&base, &model, &fixed, &t, &u, &x, y).unwrap();
    let b = objective(&heavy, &model, &fixed, &t, &u, &x, y).unwrap();
    assert_eq!(a.classifier.head.weight, b.classifier.head.weight);
    assert_eq!(a.classifier.head.bias, b.classifier.head.bias);

    let no_aux = TrainConfig {
        use_aux: false,
        ..base.clone()
    };
    let c = objective(&no_aux, &model, &fixed, &t, &u, &x, y).unwrap();
    assert_eq!(a.simt.corrected, c.simt.corrected);
    assert_eq!(a.simt.combine(&base, true), c.simt.combine(&no_aux, true));
}

#[test]
fn frozen_unregularized_simt_stays_put() {
    let data = small_data(5);
    let config = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        freeze_simt_iters: usize::MAX,
        ..small_config()
    };
    let mut state = TrainState::initialize(&data, &config).unwrap();
    let before = state.simt.u.clone();
    for _ in 0..5 {
        state.step(&data).unwrap();
    }
    assert_eq!(state.simt.u, before);
    assert_ne!(state.model.head.weight, TrainState::initialize(&data, &config).unwrap().model.head.weight);
}

#[test]
fn evaluation_does_not_change_the_state() {
    let data = small_data(9);
    let heldout = generate(&GroundTruthSpec::toy(4.0), 300, 99).unwrap();
    let mut state = TrainState::initialize(&data, &small_config()).unwrap();
    for _ in 0..3 {
        state.step(&data).unwrap();
    }
    let snapshot = state.clone();
    let first = evaluate(&state, &heldout).unwrap();
    let second = evaluate(&state, &heldout).unwrap();
    assert_eq!(first, second);
    assert_eq!(state.model, snapshot.model);
    assert_eq!(state.simt.u, snapshot.simt.u);
    assert_eq!(state.rng, snapshot.rng);
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let data = small_data(1);
    let run = |seed| {
        let mut state = TrainState::initialize(&data, &TrainConfig { seed, ..small_config() }).unwrap();
        for _ in 0..10 {
            state.step(&data).unwrap();
        }
        state
    };
    assert_eq!(run(4).simt.u, run(4).simt.u);
    assert_ne!(run(4).simt.u, run(5).simt.u);
}
