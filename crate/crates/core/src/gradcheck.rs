//! Finite-difference certification of every loss term.
//!
//! Each term is evaluated on randomly drawn small instances and its
//! analytic gradient is compared, per parameter group, against a central
//! difference. The error of a group is the largest entrywise deviation
//! divided by the larger of the two gradients' max-norms, so entries that
//! are tiny relative to the rest of the group cannot dominate through
//! round-off.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::{fd_gradient, Matrix, FD_EPS};
use crate::model::{
    aux_loss, backward, corrected_loss, forward, forward_cached, ClassifierParams, ConfidentSets,
    Dense,
};
use crate::simt::{
    anchor_loss, backprop_simt, convex_inner_loss, convex_outer_loss, materialize_simt,
    materialize_weighting, volume_loss, volume_loss_grad, AnchorSet, SimTParams, WeightingParams,
};

/// Certification threshold on the per-group relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Random instances per term.
pub const DEFAULT_INSTANCES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Corrected,
    Aux,
    Volume,
    Anchor,
    Convex,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Corrected,
        LossTerm::Aux,
        LossTerm::Volume,
        LossTerm::Anchor,
        LossTerm::Convex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Corrected => "L_LC",
            LossTerm::Aux => "L_Aux",
            LossTerm::Volume => "Volume",
            LossTerm::Anchor => "Anchor",
            LossTerm::Convex => "Convex",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub eps: f64,
    /// Test hook: perturb this term's analytic gradient so the check fails.
    pub corrupt: Option<LossTerm>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            tolerance: TOLERANCE,
            eps: FD_EPS,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TermReport {
    pub term: LossTerm,
    pub instances: usize,
    /// Parameter groups checked, e.g. `["head.weight", "U", ...]`.
    pub groups: Vec<&'static str>,
    pub max_rel_error: f64,
    /// Group in which `max_rel_error` occurred.
    pub worst_group: &'static str,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<LossTerm> {
        self.terms
            .iter()
            .filter(|t| !(t.max_rel_error < self.tolerance))
            .map(|t| t.term)
            .collect()
    }
}

/// `max_i |a_i − b_i| / max(‖a‖_∞, ‖b‖_∞, 1e−8)`
pub fn group_rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    analytic.sub(numeric).max_abs() / scale
}

/// Runs the full suite.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut terms = Vec::with_capacity(LossTerm::ALL.len());
    for (stream, term) in LossTerm::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(stream as u64);
        let mut report = TermReport {
            term,
            instances: options.instances,
            groups: Vec::new(),
            max_rel_error: 0.0,
            worst_group: "",
        };
        for _ in 0..options.instances {
            let problem = Problem::sample(&mut rng, term)?;
            for (group, mut analytic, numeric) in problem.check(term, options.eps)? {
                if options.corrupt == Some(term) {
                    analytic = analytic.map(|v| v * (1.0 + 1e-3) + 1e-3);
                }
                let err = group_rel_error(&analytic, &numeric);
                if !report.groups.contains(&group) {
                    report.groups.push(group);
                }
                if !(err <= report.max_rel_error) {
                    report.max_rel_error = err;
                    report.worst_group = group;
                }
            }
        }
        terms.push(report);
    }
    Ok(GradcheckReport {
        tolerance: options.tolerance,
        terms,
    })
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn simplex_row<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// A random small instance of every quantity the losses depend on.
struct Problem {
    closed: usize,
    open: usize,
    x: Matrix,
    pseudo: Vec<usize>,
    classifier: ClassifierParams,
    simt: SimTParams,
    weighting: WeightingParams,
    anchors: AnchorSet,
    sets: ConfidentSets,
    lambda: f64,
}

type GroupCheck = (&'static str, Matrix, Matrix);

impl Problem {
    fn sample<R: Rng + ?Sized>(rng: &mut R, term: LossTerm) -> Result<Self> {
        let closed = rng.random_range(2..=4);
        // The masked auxiliary term and the convex weights need open slots.
        let min_open = if matches!(term, LossTerm::Aux | LossTerm::Convex) { 1 } else { 0 };
        let open = rng.random_range(min_open..=3);
        let total = closed + open;
        let dim = rng.random_range(2..=5);
        let hidden = if rng.random_bool(0.3) { 0 } else { rng.random_range(3..=6) };
        let batch = rng.random_range(3..=8);

        let x = normal_matrix(batch, dim, 1.0, rng);
        let pseudo = (0..batch).map(|_| rng.random_range(0..closed)).collect();
        let dense = |i: usize, o: usize, rng: &mut R| Dense {
            weight: normal_matrix(i, o, 1.0, rng),
            bias: normal_matrix(1, o, 0.5, rng),
        };
        let classifier = if hidden == 0 {
            ClassifierParams {
                hidden: None,
                head: dense(dim, total, rng),
            }
        } else {
            ClassifierParams {
                hidden: Some(dense(dim, hidden, rng)),
                head: dense(hidden, total, rng),
            }
        };
        // Built directly: `SimTParams::new` warns about small open counts.
        let simt = SimTParams {
            u: normal_matrix(total, closed, 1.0, rng),
            class_dist: simplex_row(closed, rng),
            closed,
            open,
        };
        simt.validate()?;
        let weighting = WeightingParams {
            w: normal_matrix(total, total, 1.0, rng),
        };
        let mut anchors = AnchorSet::empty(total, closed);
        for c in 0..total {
            if rng.random_bool(0.7) {
                anchors.present[c] = true;
                anchors.posteriors.row_mut(c).copy_from_slice(&simplex_row(closed, rng));
            }
        }
        let mut sets = ConfidentSets::default();
        for i in 0..batch {
            match rng.random_range(0..3) {
                0 => sets.closed.push((i, rng.random_range(0..closed))),
                1 if open > 0 => sets.open.push((i, rng.random_range(closed..total))),
                _ => {}
            }
        }
        if sets.closed.is_empty() {
            sets.closed.push((0, rng.random_range(0..closed)));
        }
        Ok(Problem {
            closed,
            open,
            x,
            pseudo,
            classifier,
            simt,
            weighting,
            anchors,
            sets,
            lambda: rng.random_range(0.05..1.0),
        })
    }

    fn check(&self, term: LossTerm, eps: f64) -> Result<Vec<GroupCheck>> {
        match term {
            LossTerm::Corrected => self.check_corrected(eps),
            LossTerm::Aux => self.check_aux(eps),
            LossTerm::Volume => {
                let analytic = backprop_simt(&self.simt, &volume_loss_grad(&materialize_simt(&self.simt)?)?)?;
                let numeric = self.fd_over_u(eps, |p| volume_loss(&materialize_simt(p)?))?;
                Ok(vec![("U", analytic, numeric)])
            }
            LossTerm::Anchor => {
                let (_, d_t) = anchor_loss(&materialize_simt(&self.simt)?, &self.anchors)?;
                let analytic = backprop_simt(&self.simt, &d_t)?;
                let numeric =
                    self.fd_over_u(eps, |p| Ok(anchor_loss(&materialize_simt(p)?, &self.anchors)?.0))?;
                Ok(vec![("U", analytic, numeric)])
            }
            LossTerm::Convex => self.check_convex(eps),
        }
    }

    fn check_corrected(&self, eps: f64) -> Result<Vec<GroupCheck>> {
        let t = materialize_simt(&self.simt)?;
        let (post, cache) = forward_cached(&self.classifier, &self.x);
        let lc = corrected_loss(&post, &t, &self.pseudo)?;
        let grads = backward(&self.classifier, &self.x, &cache, &lc.d_logits);
        let mut out = self.fd_over_classifier(&grads, eps, |params| {
            Ok(corrected_loss(&forward(params, &self.x), &t, &self.pseudo)?.value)
        })?;
        let analytic = backprop_simt(&self.simt, &lc.d_t)?;
        let numeric = self.fd_over_u(eps, |p| {
            Ok(corrected_loss(&post, &materialize_simt(p)?, &self.pseudo)?.value)
        })?;
        out.push(("U", analytic, numeric));
        Ok(out)
    }

    fn check_aux(&self, eps: f64) -> Result<Vec<GroupCheck>> {
        let (post, cache) = forward_cached(&self.classifier, &self.x);
        let (_, d_logits) = aux_loss(&post, &self.sets, self.lambda, self.closed, self.open)?;
        let grads = backward(&self.classifier, &self.x, &cache, &d_logits);
        self.fd_over_classifier(&grads, eps, |params| {
            Ok(aux_loss(&forward(params, &self.x), &self.sets, self.lambda, self.closed, self.open)?.0)
        })
    }

    fn check_convex(&self, eps: f64) -> Result<Vec<GroupCheck>> {
        let t = materialize_simt(&self.simt)?;
        let u = materialize_weighting(&self.weighting);

        let (_, d_w) = convex_inner_loss(&u, &t)?;
        let numeric_w = fd_scalar(eps, &self.weighting.w, |w| {
            let u = materialize_weighting(&WeightingParams { w: w.clone() });
            Ok(convex_inner_loss(&u, &t)?.0)
        })?;

        let (_, d_t) = convex_outer_loss(&u, &t)?;
        let analytic_u = backprop_simt(&self.simt, &d_t)?;
        let numeric_u = self.fd_over_u(eps, |p| Ok(convex_outer_loss(&u, &materialize_simt(p)?)?.0))?;
        Ok(vec![("W", d_w, numeric_w), ("U", analytic_u, numeric_u)])
    }

    fn fd_over_u(&self, eps: f64, f: impl Fn(&SimTParams) -> Result<f64>) -> Result<Matrix> {
        fd_scalar(eps, &self.simt.u, |u| {
            let params = SimTParams {
                u: u.clone(),
                ..self.simt.clone()
            };
            f(&params)
        })
    }

    /// Checks all four weight and bias groups of the classifier.
    fn fd_over_classifier(
        &self,
        grads: &ClassifierParams,
        eps: f64,
        f: impl Fn(&ClassifierParams) -> Result<f64>,
    ) -> Result<Vec<GroupCheck>> {
        let mut out = Vec::new();
        for group in ["hidden.weight", "hidden.bias", "head.weight", "head.bias"] {
            let (Some(base), Some(analytic)) = (group_of(&self.classifier, group), group_of(grads, group))
            else {
                continue;
            };
            let numeric = fd_scalar(eps, base, |m| {
                let mut params = self.classifier.clone();
                *group_of_mut(&mut params, group).expect("group exists") = m.clone();
                f(&params)
            })?;
            out.push((group, analytic.clone(), numeric));
        }
        Ok(out)
    }
}

fn group_of<'a>(params: &'a ClassifierParams, group: &str) -> Option<&'a Matrix> {
    match group {
        "hidden.weight" => params.hidden.as_ref().map(|d| &d.weight),
        "hidden.bias" => params.hidden.as_ref().map(|d| &d.bias),
        "head.weight" => Some(&params.head.weight),
        "head.bias" => Some(&params.head.bias),
        _ => None,
    }
}

fn group_of_mut<'a>(params: &'a mut ClassifierParams, group: &str) -> Option<&'a mut Matrix> {
    match group {
        "hidden.weight" => params.hidden.as_mut().map(|d| &mut d.weight),
        "hidden.bias" => params.hidden.as_mut().map(|d| &mut d.bias),
        "head.weight" => Some(&mut params.head.weight),
        "head.bias" => Some(&mut params.head.bias),
        _ => None,
    }
}

/// [`fd_gradient`] for a fallible function; the first error wins.
fn fd_scalar(eps: f64, x: &Matrix, f: impl Fn(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut failure = None;
    let grad = fd_gradient(
        |m| match f(m) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        x,
        eps,
    );
    match failure {
        Some(e) => Err(e),
        None => grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_back() {
        for term in LossTerm::ALL {
            assert_eq!(LossTerm::parse(term.name()), Some(term));
        }
        assert_eq!(LossTerm::parse("volume"), Some(LossTerm::Volume));
        assert_eq!(LossTerm::parse("nope"), None);
    }

    #[test]
    fn group_error_is_scale_free() {
        let a = Matrix::from_rows(&[[1.0, 1e-9]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 2e-9]]).unwrap();
        assert!(group_rel_error(&a, &b) < 1e-8);
        assert!(group_rel_error(&a.scale(1e6), &b.scale(1e6)) < 1e-8);
        assert_eq!(group_rel_error(&a, &a.scale(2.0)), 0.5);
    }

    #[test]
    fn small_suite_passes_and_corruption_is_named() {
        let options = GradcheckOptions {
            instances: 5,
            ..Default::default()
        };
        let report = run(&options).unwrap();
        assert!(report.passed(), "{report:?}");
        let report = run(&GradcheckOptions {
            corrupt: Some(LossTerm::Anchor),
            ..options
        })
        .unwrap();
        assert_eq!(report.failing(), vec![LossTerm::Anchor]);
    }
}
