use proptest::prelude::*;
use simt_core::simt::{
    convex_inner_loss, convex_row_residuals, materialize_simt, materialize_weighting, SimT, SimTParams,
    WeightingMatrix, WeightingParams,
};
use simt_core::synth::simt_error;
use simt_core::Matrix;

fn simt_params() -> impl Strategy<Value = SimTParams> {
    (1usize..=5, 0usize..=4).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(-30.0f64..30.0, (c + n) * c),
            prop::collection::vec(0.0f64..1.0, c),
        )
            .prop_map(move |(u, raw)| {
                let total: f64 = raw.iter().sum();
                let dist = if total > 0.0 {
                    raw.iter().map(|v| v / total).collect()
                } else {
                    vec![1.0 / c as f64; c]
                };
                SimTParams {
                    u: Matrix::from_vec(c + n, c, u).unwrap(),
                    class_dist: dist,
                    closed: c,
                    open: n,
                }
            })
    })
}

fn weighting_params() -> impl Strategy<Value = WeightingParams> {
    (2usize..=7).prop_flat_map(|k| {
        prop::collection::vec(-40.0f64..40.0, k * k)
            .prop_map(move |w| WeightingParams { w: Matrix::from_vec(k, k, w).unwrap() })
    })
}

/// A random row-stochastic matrix whose closed rows are diagonally dominant.
fn simt_matrix(c: usize, n: usize, raw: &[f64]) -> SimT {
    let mut m = Matrix::from_fn(c + n, c, |i, j| raw[(i * c + j) % raw.len()] + 1e-3);
    for j in 0..c {
        let max = m.row(j).iter().cloned().fold(0.0, f64::max);
        m.row_mut(j)[j] = max + 0.1;
    }
    let sums = m.row_sums();
    let m = Matrix::from_fn(c + n, c, |i, j| m[(i, j)] / sums[i]);
    // Renormalizing once more absorbs the last bit of round-off.
    SimT::from_matrix(m, c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn materialized_simt_is_a_valid_transition_matrix(params in simt_params()) {
        let t = materialize_simt(&params).unwrap();
        let m = t.matrix();
        for (j, row) in m.row_iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            if j < params.closed {
                prop_assert!(row.iter().all(|&v| v <= row[j]));
            }
        }
    }

    #[test]
    fn weighting_rows_are_convex_combinations(params in weighting_params()) {
        let u = materialize_weighting(&params);
        let m = u.matrix();
        for j in 0..m.rows() {
            prop_assert_eq!(m[(j, j)], -1.0);
            let off: f64 = (0..m.cols()).filter(|&k| k != j).map(|k| m[(j, k)]).sum();
            prop_assert!((off - 1.0).abs() <= 1e-12);
        }
        prop_assert!(WeightingMatrix::from_matrix(m.clone()).is_ok());
    }

    #[test]
    fn inner_descent_is_monotone(raw in prop::collection::vec(0.0f64..1.0, 24), c in 2usize..=3, n in 1usize..=3) {
        let t = simt_matrix(c, n, &raw);
        let mut params = WeightingParams::uniform(c + n);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (loss, grad) = convex_inner_loss(&materialize_weighting(&params), &t).unwrap();
            prop_assert!(loss <= last + 1e-15, "{loss} > {last}");
            last = loss;
            params.w.axpy(-0.05, &grad);
        }
    }

    /// The reported open MAE equals the best over all injections.
    #[test]
    fn open_matching_is_optimal(
        raw_est in prop::collection::vec(0.0f64..1.0, 24),
        raw_true in prop::collection::vec(0.0f64..1.0, 24),
        n_true in 0usize..=5,
        spare in 0usize..=2,
    ) {
        let c = 2;
        let est = simt_matrix(c, n_true + spare, &raw_est);
        let truth = simt_matrix(c, n_true, &raw_true);
        let report = simt_error(&est, truth.matrix()).unwrap();
        let row_mae = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / c as f64;
        let mut best = f64::INFINITY;
        for_each_injection(n_true, n_true + spare, &mut Vec::new(), &mut |assign| {
            let total: f64 = assign
                .iter()
                .enumerate()
                .map(|(i, &e)| row_mae(truth.matrix().row(c + i), est.matrix().row(c + e)))
                .sum();
            best = best.min(total / n_true.max(1) as f64);
        });
        if n_true == 0 {
            best = 0.0;
        }
        prop_assert!((report.open_mae - best).abs() <= 1e-12, "{} vs {best}", report.open_mae);
        let mut used = report.matching.clone();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), n_true);
    }
}

fn for_each_injection(rows: usize, cols: usize, prefix: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if prefix.len() == rows {
        f(prefix);
        return;
    }
    for e in 0..cols {
        if !prefix.contains(&e) {
            prefix.push(e);
            for_each_injection(rows, cols, prefix, f);
            prefix.pop();
        }
    }
}

#[test]
fn dependent_open_row_is_driven_to_zero_residual() {
    // Row 3 is 0.5·row 0 + 0.5·row 1.
    let m = Matrix::from_rows(&[
        [0.8, 0.1, 0.1],
        [0.1, 0.8, 0.1],
        [0.1, 0.1, 0.8],
        [0.45, 0.45, 0.1],
    ])
    .unwrap();
    let t = SimT::from_matrix(m, 3).unwrap();
    let mut params = WeightingParams::uniform(4);
    for _ in 0..500 {
        let (_, grad) = convex_inner_loss(&materialize_weighting(&params), &t).unwrap();
        params.w.axpy(-10.0, &grad);
    }
    let residuals = convex_row_residuals(&materialize_weighting(&params), &t).unwrap();
    assert!(residuals[3] < 1e-4, "{residuals:?}");
    assert!(residuals[0] > 1e-2, "{residuals:?}");
}

#[test]
fn saturated_parameters_still_materialize() {
    let params = SimTParams {
        u: Matrix::filled(4, 2, 700.0),
        class_dist: vec![0.5, 0.5],
        closed: 2,
        open: 2,
    };
    let t = materialize_simt(&params).unwrap();
    assert!(t.matrix().is_finite());
}
