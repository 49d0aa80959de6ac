//! Exact first and second moments of the SGD iterate on least squares.
//!
//! With batches drawn uniformly without replacement,
//! `E[g gᵀ | w] = (c_b/n) Σ_i ∇L_i ∇L_iᵀ + (1 − c_b) ∇L ∇Lᵀ`, so the
//! second moment `S_t = E[w_t w_tᵀ]` obeys a linear recursion whose only
//! batch dependence is through `c_b`. Propagating `S_t` as a polynomial in
//! `c_b` gives every batch size from one pass.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::LinearCombTerm;
use crate::cb_poly::{cb_factor, MatrixCbPoly, ScalarCbPoly};
use crate::data::{Dataset, LearningRateSchedule};
use crate::error::{Error, Result};

/// `E[w_t | w_0]` and `E[w_t w_tᵀ | w_0]` (the latter as a polynomial in `c_b`).
#[derive(Debug, Clone)]
pub struct MomentState {
    pub t: usize,
    pub mean: DVector<f64>,
    pub second_moment: MatrixCbPoly,
}

impl MomentState {
    pub fn initial(w0: &DVector<f64>) -> Self {
        Self {
            t: 0,
            mean: w0.clone(),
            second_moment: MatrixCbPoly::constant(w0 * w0.transpose()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `S_t(c) − μ_t μ_tᵀ`, the covariance of `w_t` at batch factor `c`.
    pub fn covariance_at(&self, c: f64) -> DMatrix<f64> {
        self.second_moment.evaluate(c) - &self.mean * self.mean.transpose()
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.dim() != dataset.p() {
            return Err(Error::DimensionMismatch {
                context: "moment state vs dataset",
                expected: dataset.p().to_string(),
                found: self.dim().to_string(),
            });
        }
        Ok(())
    }
}

/// Per-sample squared residual `E[(x_iᵀ w − y_i)²]` as a polynomial in `c_b`.
fn residual_second_moment(dataset: &Dataset, state: &MomentState, i: usize) -> ScalarCbPoly {
    let x = dataset.sample(i);
    let y = dataset.targets()[i];
    let shift = -2.0 * y * x.dot(&state.mean) + y * y;
    let mut poly = state.second_moment.map(|s| (x.transpose() * s * &x)[(0, 0)]);
    poly = poly.add(&ScalarCbPoly::constant(shift));
    poly
}

/// `(1/n) Σ_i E[∇L_i ∇L_iᵀ]`. Uses `∇L_i = x_i r_i`, so each term is
/// `E[r_i²] C_i`.
fn mean_sample_outer(dataset: &Dataset, state: &MomentState) -> MatrixCbPoly {
    let n = dataset.n();
    let p = dataset.p();
    let residuals: Vec<ScalarCbPoly> = (0..n).map(|i| residual_second_moment(dataset, state, i)).collect();
    let degree = state.second_moment.degree();
    let coeffs = (0..=degree)
        .map(|k| {
            let mut acc = DMatrix::zeros(p, p);
            for (i, r) in residuals.iter().enumerate() {
                acc += &dataset.gram_per_sample()[i] * r.coeffs()[k];
            }
            acc / n as f64
        })
        .collect();
    MatrixCbPoly::from_coeffs(coeffs).expect("non-empty")
}

/// `E[∇L ∇Lᵀ] = C S C − C μ uᵀ − u μᵀ C + u uᵀ`.
fn full_outer(dataset: &Dataset, state: &MomentState) -> MatrixCbPoly {
    let c = dataset.gram_mean();
    let u = dataset.target_moment();
    let cmu = c * &state.mean;
    let cross = -(&cmu * u.transpose()) - u * cmu.transpose() + u * u.transpose();
    state
        .second_moment
        .map(|s| c * s * c)
        .add(&MatrixCbPoly::constant(cross))
}

/// `E[g gᵀ] = E[∇L∇Lᵀ] + c_b ((1/n)Σ E[∇L_i∇L_iᵀ] − E[∇L∇Lᵀ])`.
fn gradient_outer(dataset: &Dataset, state: &MomentState) -> MatrixCbPoly {
    let full = full_outer(dataset, state);
    mean_sample_outer(dataset, state).sub(&full).times_c().add(&full)
}

fn step(dataset: &Dataset, state: &MomentState, alpha: f64) -> MomentState {
    let c = dataset.gram_mean();
    let u = dataset.target_moment();
    let mean = &state.mean - (c * &state.mean - u) * alpha;

    let mu_u = &state.mean * u.transpose();
    let drift = state
        .second_moment
        .map(|s| s - (s * c + c * s) * alpha)
        .add(&MatrixCbPoly::constant((&mu_u + mu_u.transpose()) * alpha));
    let second_moment = drift.add_scaled(&gradient_outer(dataset, state), alpha * alpha);

    MomentState {
        t: state.t + 1,
        mean,
        second_moment,
    }
}

/// Exact moment sequence `[state_0, …, state_{t_max}]`.
pub fn propagate_moments(
    dataset: &Dataset,
    w0: &DVector<f64>,
    schedule: &LearningRateSchedule,
    t_max: usize,
) -> Result<Vec<MomentState>> {
    if w0.len() != dataset.p() {
        return Err(Error::DimensionMismatch {
            context: "initial weights",
            expected: dataset.p().to_string(),
            found: w0.len().to_string(),
        });
    }
    schedule.validate()?;
    let mut states = Vec::with_capacity(t_max + 1);
    states.push(MomentState::initial(w0));
    for t in 0..t_max {
        let next = step(dataset, &states[t], schedule.rate(t));
        if !next.second_moment.is_finite() || next.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// `‖E[g_t | F₀]‖² = ‖C μ_t − u‖²`.
fn mean_gradient_norm2(dataset: &Dataset, state: &MomentState) -> f64 {
    dataset.full_gradient(&state.mean).norm_squared()
}

/// `Var(g_t^b | F₀)` as a polynomial in `c_b`.
pub fn variance_stochastic_gradient_poly(state: &MomentState, dataset: &Dataset) -> Result<ScalarCbPoly> {
    state.check(dataset)?;
    let m2 = gradient_outer(dataset, state).trace();
    Ok(m2.add(&ScalarCbPoly::constant(-mean_gradient_norm2(dataset, state))))
}

/// `Var(∇L(w_t^b) | F₀)` as a polynomial in `c_b`.
pub fn variance_full_gradient_poly(state: &MomentState, dataset: &Dataset) -> Result<ScalarCbPoly> {
    state.check(dataset)?;
    let m2 = full_outer(dataset, state).trace();
    Ok(m2.add(&ScalarCbPoly::constant(-mean_gradient_norm2(dataset, state))))
}

pub fn variance_stochastic_gradient(state: &MomentState, dataset: &Dataset, b: usize) -> Result<f64> {
    let c = cb_factor(dataset.n(), b)?.value;
    Ok(variance_stochastic_gradient_poly(state, dataset)?.evaluate(c))
}

pub fn variance_full_gradient(state: &MomentState, dataset: &Dataset, b: usize) -> Result<f64> {
    let c = cb_factor(dataset.n(), b)?.value;
    Ok(variance_full_gradient_poly(state, dataset)?.evaluate(c))
}

/// `E‖Σ_i A_i ∇L_i(w_t)‖² = tr(AᵀA S_t) − 2 vᵀ A μ_t + ‖v‖²` with
/// `A = Σ A_i C_i`, `v = Σ A_i y_i x_i`.
pub fn combination_norm_poly(state: &MomentState, dataset: &Dataset, term: &LinearCombTerm) -> Result<ScalarCbPoly> {
    state.check(dataset)?;
    let p = dataset.p();
    let mut a = DMatrix::zeros(p, p);
    let mut v = DVector::zeros(p);
    for (&i, ai) in term.coefficients() {
        a += ai * &dataset.gram_per_sample()[i];
        v += ai * dataset.sample(i) * dataset.targets()[i];
    }
    let ata = a.transpose() * &a;
    let constant = -2.0 * v.dot(&(&a * &state.mean)) + v.norm_squared();
    let poly = state
        .second_moment
        .map(|s| ata.dot(s))
        .add(&ScalarCbPoly::constant(constant));
    Ok(poly.scale(term.scalar_weight()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceRow {
    pub b: usize,
    pub var_g: f64,
    pub var_full_grad: f64,
}

/// Per-`b` variances at one iteration plus non-increase verdicts.
#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityTable {
    pub t: usize,
    pub rows: Vec<VarianceRow>,
    pub var_g_non_increasing: bool,
    pub var_full_grad_non_increasing: bool,
    /// Smallest `v(b) − v(b+1)`; negative values are increases.
    pub min_gap_g: f64,
    pub min_gap_full_grad: f64,
}

pub const MONOTONICITY_REL_TOL: f64 = 1e-12;

fn verdict(values: &[f64]) -> (bool, f64) {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min_gap = values
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::INFINITY, f64::min);
    let ok = values.windows(2).all(|w| w[1] <= w[0] + MONOTONICITY_REL_TOL * scale);
    (ok, min_gap)
}

pub fn monotonicity_table(states: &[MomentState], dataset: &Dataset, t: usize) -> Result<MonotonicityTable> {
    let state = states.get(t).ok_or(Error::OutOfRange { index: t, len: states.len() })?;
    let g_poly = variance_stochastic_gradient_poly(state, dataset)?;
    let f_poly = variance_full_gradient_poly(state, dataset)?;
    let n = dataset.n();
    let rows: Vec<VarianceRow> = (1..=n)
        .map(|b| {
            let c = cb_factor(n, b).expect("b in range").value;
            VarianceRow {
                b,
                var_g: g_poly.evaluate(c),
                var_full_grad: f_poly.evaluate(c),
            }
        })
        .collect();
    let (g_ok, g_gap) = verdict(&rows.iter().map(|r| r.var_g).collect::<Vec<_>>());
    let (f_ok, f_gap) = verdict(&rows.iter().map(|r| r.var_full_grad).collect::<Vec<_>>());
    Ok(MonotonicityTable {
        t,
        rows,
        var_g_non_increasing: g_ok,
        var_full_grad_non_increasing: f_ok,
        min_gap_g: g_gap,
        min_gap_full_grad: f_gap,
    })
}
