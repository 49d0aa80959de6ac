//! Brute-force references for the exact regression engine: enumeration of
//! every size-`b` batch, and the backward term-tree expansion of
//! `E‖Σ A_i ∇L_i(w_t)‖²` down to the initial weights.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

use crate::cb_poly::{cb_factor, ScalarCbPoly};
use crate::data::{Dataset, LearningRateSchedule};
use crate::error::{invalid, Error, Result};
use crate::numeric::{binomial, CompensatedSum};

pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Weighted linear combination `weight · Σ_i A_i ∇L_i` with sparse `A_i`.
///
/// `cb_degree` counts the `c_b` factors picked up while expanding the tree;
/// `weight` excludes them.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCombTerm {
    coefficients: BTreeMap<usize, DMatrix<f64>>,
    scalar_weight: f64,
    cb_degree: usize,
}

impl LinearCombTerm {
    pub fn new(coefficients: BTreeMap<usize, DMatrix<f64>>) -> Self {
        Self {
            coefficients,
            scalar_weight: 1.0,
            cb_degree: 0,
        }
    }

    /// `A_i = a` for every `i < n`.
    pub fn uniform(n: usize, a: DMatrix<f64>) -> Self {
        Self::new((0..n).map(|i| (i, a.clone())).collect())
    }

    pub fn coefficients(&self) -> &BTreeMap<usize, DMatrix<f64>> {
        &self.coefficients
    }

    pub fn scalar_weight(&self) -> f64 {
        self.scalar_weight
    }

    pub fn cb_degree(&self) -> usize {
        self.cb_degree
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.values().all(|a| a.iter().all(|&v| v == 0.0))
    }

    /// Flips the sign of every coefficient so the first nonzero entry (lowest
    /// sample index, column-major) is positive. The squared norm is unchanged.
    pub fn canonical_sign(mut self) -> Self {
        let first = self
            .coefficients
            .values()
            .flat_map(|a| a.iter().copied())
            .find(|&v| v != 0.0);
        if matches!(first, Some(v) if v < 0.0) {
            for a in self.coefficients.values_mut() {
                a.neg_mut();
            }
        }
        self
    }

    fn combined(&self, dataset: &Dataset, w: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(dataset.p());
        for (&i, a) in &self.coefficients {
            acc += a * dataset.sample_gradient(i, w);
        }
        acc
    }

    /// `A = Σ_i A_i C_i`.
    fn gram_combination(&self, dataset: &Dataset) -> DMatrix<f64> {
        let p = dataset.p();
        let mut a = DMatrix::zeros(p, p);
        for (&i, ai) in &self.coefficients {
            a += ai * &dataset.gram_per_sample()[i];
        }
        a
    }
}

fn check_square(dataset: &Dataset, a: &DMatrix<f64>) -> Result<()> {
    let p = dataset.p();
    if a.shape() != (p, p) {
        return Err(Error::DimensionMismatch {
            context: "combination matrix",
            expected: format!("{p}x{p}"),
            found: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

fn check_enumerable(n: usize, b: usize) -> Result<()> {
    cb_factor(n, b)?;
    let count = binomial(n, b);
    if count > ENUMERATION_LIMIT {
        return Err(Error::GuardExceeded {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Average of `‖A g‖²` over every size-`b` batch, `g = (1/b) Σ_{i∈B} ∇L_i(w)`.
pub fn batch_enumeration_second_moment(dataset: &Dataset, w: &DVector<f64>, b: usize, a: &DMatrix<f64>) -> Result<f64> {
    check_square(dataset, a)?;
    check_enumerable(dataset.n(), b)?;
    let projected: Vec<DVector<f64>> = (0..dataset.n()).map(|i| a * dataset.sample_gradient(i, w)).collect();
    let mut total = CompensatedSum::new();
    let mut count = 0usize;
    for batch in (0..dataset.n()).combinations(b) {
        let mut g = DVector::zeros(dataset.p());
        for i in batch {
            g += &projected[i];
        }
        total.add((g / b as f64).norm_squared());
        count += 1;
    }
    Ok(total.value() / count as f64)
}

/// Average of the batch gradient over every size-`b` batch.
pub fn batch_enumeration_mean_gradient(dataset: &Dataset, w: &DVector<f64>, b: usize) -> Result<DVector<f64>> {
    check_enumerable(dataset.n(), b)?;
    let p = dataset.p();
    let mut sums = vec![CompensatedSum::new(); p];
    let mut count = 0usize;
    for batch in (0..dataset.n()).combinations(b) {
        let g = dataset.batch_gradient(&batch, w);
        for (acc, v) in sums.iter_mut().zip(g.iter()) {
            acc.add(*v);
        }
        count += 1;
    }
    Ok(DVector::from_iterator(p, sums.iter().map(|s| s.value() / count as f64)))
}

/// Closed form `c_b((1/n)Σ‖A∇L_i‖² − ‖A∇L‖²) + ‖A∇L‖²`.
pub fn batch_second_moment_closed_form(dataset: &Dataset, w: &DVector<f64>, b: usize, a: &DMatrix<f64>) -> Result<f64> {
    check_square(dataset, a)?;
    let c = cb_factor(dataset.n(), b)?.value;
    let n = dataset.n() as f64;
    let mean_sq = (0..dataset.n())
        .map(|i| (a * dataset.sample_gradient(i, w)).norm_squared())
        .collect::<CompensatedSum>()
        .value()
        / n;
    let full_sq = (a * dataset.full_gradient(w)).norm_squared();
    Ok(c * (mean_sq - full_sq) + full_sq)
}

pub const TERM_TREE_MAX_N: usize = 5;
pub const TERM_TREE_MAX_T: usize = 4;

/// `E[‖Σ A_i ∇L_i(w_t)‖² | w_0]` as a polynomial in `c_b`, by expanding one
/// iteration at a time back to `w_0`.
///
/// Each expansion step at learning rate `α` replaces a term by
/// `B_i = A_i − (α/n) A` (same weight) plus, for every unordered pair
/// `k < l`, the term `{k: A, l: −A}` with weight `α² c_b / n²`. The ordered
/// pair `(l, k)` gives the negated term, which has the same squared norm.
pub fn term_tree_polynomial(
    dataset: &Dataset,
    w0: &DVector<f64>,
    schedule: &LearningRateSchedule,
    t: usize,
    seed_term: &LinearCombTerm,
) -> Result<ScalarCbPoly> {
    let n = dataset.n();
    if n > TERM_TREE_MAX_N || t > TERM_TREE_MAX_T {
        let fanout = 1 + (n * n.saturating_sub(1) / 2) as u128;
        return Err(Error::GuardExceeded {
            count: fanout.saturating_pow(t as u32),
            limit: (1 + (TERM_TREE_MAX_N * (TERM_TREE_MAX_N - 1) / 2) as u128).pow(TERM_TREE_MAX_T as u32),
        });
    }
    if w0.len() != dataset.p() {
        return Err(invalid("w0", "dimension differs from dataset"));
    }
    for (&i, a) in seed_term.coefficients() {
        if i >= n {
            return Err(Error::OutOfRange { index: i, len: n });
        }
        check_square(dataset, a)?;
    }
    let mut coeffs = vec![CompensatedSum::new(); t + 1];
    expand(dataset, w0, schedule, t, seed_term.clone(), &mut coeffs);
    ScalarCbPoly::from_coeffs(coeffs.iter().map(CompensatedSum::value).collect())
}

fn expand(
    dataset: &Dataset,
    w0: &DVector<f64>,
    schedule: &LearningRateSchedule,
    level: usize,
    term: LinearCombTerm,
    out: &mut [CompensatedSum],
) {
    if term.scalar_weight == 0.0 || term.is_zero() {
        return;
    }
    if level == 0 {
        let v = term.combined(dataset, w0).norm_squared();
        out[term.cb_degree].add(term.scalar_weight * v);
        return;
    }
    let n = dataset.n();
    let alpha = schedule.rate(level - 1);
    let a = term.gram_combination(dataset);

    let zero = DMatrix::zeros(dataset.p(), dataset.p());
    let main = LinearCombTerm {
        coefficients: (0..n)
            .map(|i| {
                let ai = term.coefficients.get(&i).unwrap_or(&zero);
                (i, ai - &a * (alpha / n as f64))
            })
            .collect(),
        scalar_weight: term.scalar_weight,
        cb_degree: term.cb_degree,
    };
    expand(dataset, w0, schedule, level - 1, main, out);

    let pair_weight = term.scalar_weight * alpha * alpha / (n * n) as f64;
    for k in 0..n {
        for l in (k + 1)..n {
            let child = LinearCombTerm {
                coefficients: BTreeMap::from([(k, a.clone()), (l, -a.clone())]),
                scalar_weight: pair_weight,
                cb_degree: term.cb_degree + 1,
            };
            expand(dataset, w0, schedule, level - 1, child, out);
        }
    }
}

pub fn term_tree_expectation(
    dataset: &Dataset,
    w0: &DVector<f64>,
    schedule: &LearningRateSchedule,
    t: usize,
    seed_term: &LinearCombTerm,
    b: usize,
) -> Result<f64> {
    let c = cb_factor(dataset.n(), b)?.value;
    Ok(term_tree_polynomial(dataset, w0, schedule, t, seed_term)?.evaluate(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngStream;
    use crate::regression::{combination_norm_poly, propagate_moments};

    fn toy() -> Dataset {
        Dataset::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]), DVector::from_vec(vec![0.0, 2.0])).unwrap()
    }

    fn random_matrix(s: &mut RngStream, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |_, _| s.standard_normal())
    }

    #[test]
    fn toy_singleton_batches() {
        let d = toy();
        let w = DVector::from_vec(vec![0.0]);
        let a = DMatrix::identity(1, 1);
        assert_eq!(batch_enumeration_second_moment(&d, &w, 1, &a).unwrap(), 2.0);
        assert_eq!(batch_second_moment_closed_form(&d, &w, 1, &a).unwrap(), 2.0);
    }

    #[test]
    fn full_batch_equals_full_gradient() {
        let mut s = RngStream::new(9, 0);
        let d = Dataset::synthetic_gaussian(&mut s, 5, 3, 1.0).unwrap();
        let w = DVector::from_fn(3, |_, _| s.standard_normal());
        let a = random_matrix(&mut s, 3);
        let expected = (&a * d.full_gradient(&w)).norm_squared();
        let got = batch_enumeration_second_moment(&d, &w, 5, &a).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected);
    }

    #[test]
    fn closed_form_on_random_instance() {
        let mut s = RngStream::new(10, 0);
        let d = Dataset::synthetic_gaussian(&mut s, 6, 3, 1.0).unwrap();
        let w = DVector::from_fn(3, |_, _| s.standard_normal());
        let a = random_matrix(&mut s, 3);
        let lhs = batch_enumeration_second_moment(&d, &w, 3, &a).unwrap();
        let rhs = batch_second_moment_closed_form(&d, &w, 3, &a).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs());
    }

    #[test]
    fn enumeration_is_unbiased() {
        let mut s = RngStream::new(11, 0);
        let d = Dataset::synthetic_gaussian(&mut s, 7, 2, 1.0).unwrap();
        let w = DVector::from_fn(2, |_, _| s.standard_normal());
        for b in 1..=7 {
            let mean = batch_enumeration_mean_gradient(&d, &w, b).unwrap();
            assert!((mean - d.full_gradient(&w)).amax() < 1e-12);
        }
    }

    #[test]
    fn enumeration_guard() {
        let mut s = RngStream::new(12, 0);
        let d = Dataset::synthetic_gaussian(&mut s, 40, 1, 1.0).unwrap();
        let w = DVector::zeros(1);
        let a = DMatrix::identity(1, 1);
        assert!(matches!(
            batch_enumeration_second_moment(&d, &w, 20, &a),
            Err(Error::GuardExceeded { .. })
        ));
        assert!(batch_enumeration_second_moment(&d, &w, 2, &a).is_ok());
    }

    #[test]
    fn leaf_is_full_gradient_norm() {
        let mut s = RngStream::new(13, 0);
        let d = Dataset::synthetic_gaussian(&mut s, 4, 2, 1.0).unwrap();
        let w0 = DVector::from_fn(2, |_, _| s.standard_normal());
        let term = LinearCombTerm::uniform(4, DMatrix::identity(2, 2) / 4.0);
        let v = term_tree_expectation(&d, &w0, &LearningRateSchedule::constant(0.1), 0, &term, 2).unwrap();
        let expected = d.full_gradient(&w0).norm_squared();
        assert!((v - expected).abs() < 1e-14 * expected);
    }

    #[test]
    fn toy_one_step_expectation() {
        let d = toy();
        let w0 = DVector::from_vec(vec![0.0]);
        let term = LinearCombTerm::uniform(2, DMatrix::identity(1, 1) / 2.0);
        let v = term_tree_expectation(&d, &w0, &LearningRateSchedule::constant(0.5), 1, &term, 1).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pair_children_are_negations() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let kl = LinearCombTerm::new(BTreeMap::from([(1, a.clone()), (3, -a.clone())]));
        let lk = LinearCombTerm::new(BTreeMap::from([(1, -a.clone()), (3, a.clone())]));
        assert_eq!(kl.canonical_sign(), lk.canonical_sign());
    }

    #[test]
    fn tree_matches_engine() {
        let mut s = RngStream::new(14, 0);
        for trial in 0..6 {
            let n = 2 + trial % 3;
            let p = 1 + trial % 2;
            let d = Dataset::synthetic_gaussian(&mut s, n, p, 0.7).unwrap();
            let w0 = DVector::from_fn(p, |_, _| s.standard_normal());
            let sched = LearningRateSchedule::inverse_iteration(0.4);
            let mut map = BTreeMap::new();
            for i in 0..n {
                if i != 1 {
                    map.insert(i, random_matrix(&mut s, p));
                }
            }
            let term = LinearCombTerm::new(map);
            let states = propagate_moments(&d, &w0, &sched, 3).unwrap();
            for t in 0..=3 {
                let tree = term_tree_polynomial(&d, &w0, &sched, t, &term).unwrap();
                let engine = combination_norm_poly(&states[t], &d, &term).unwrap();
                for b in 1..=n {
                    let c = cb_factor(n, b).unwrap().value;
                    let (x, y) = (tree.evaluate(c), engine.evaluate(c));
                    assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-300), "trial {trial} t {t} b {b}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn tree_guard() {
        let mut s = RngStream::new(15, 0);
        let d = Dataset::synthetic_gaussian(&mut s, 6, 1, 1.0).unwrap();
        let term = LinearCombTerm::uniform(6, DMatrix::identity(1, 1));
        let r = term_tree_polynomial(&d, &DVector::zeros(1), &LearningRateSchedule::constant(0.1), 1, &term);
        assert!(matches!(r, Err(Error::GuardExceeded { .. })));
    }
}
