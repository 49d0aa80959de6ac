//! Least-squares polynomials in `1/b`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::mc::quantile_sorted;

/// Reciprocal condition number below which the design is rank deficient.
pub const RANK_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyFit {
    pub degree: usize,
    pub zero_intercept: bool,
    /// `β₀..β_d`; `β₀` is exactly zero when `zero_intercept`.
    pub coefficients: Vec<f64>,
    /// Root-mean-square residual over the fitted points.
    pub residual: f64,
    /// 2-norm condition number of the column-scaled design.
    pub condition: f64,
}

impl PolyFit {
    pub fn evaluate(&self, b: f64) -> f64 {
        let x = 1.0 / b;
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Fits `β₀ + β₁/b + … + β_d/b^d` (no `β₀` column when `zero_intercept`) by
/// Householder QR on unit-norm columns.
pub fn fit_inverse_b_poly(points: &[(f64, f64)], degree: usize, zero_intercept: bool) -> Result<PolyFit> {
    let first_power = usize::from(zero_intercept);
    let cols = degree + 1 - first_power;
    if degree == 0 && zero_intercept {
        return Err(invalid("degree", "a zero-intercept fit needs degree >= 1"));
    }
    if points.len() < degree + 1 {
        return Err(invalid("points", format!("need at least {} points, got {}", degree + 1, points.len())));
    }
    for (i, &(b, v)) in points.iter().enumerate() {
        if !(b > 0.0 && b.is_finite() && v.is_finite()) {
            return Err(invalid("points", format!("point {i} is not a finite (b > 0, value) pair")));
        }
        if points[..i].iter().any(|&(c, _)| c == b) {
            return Err(invalid("points", format!("duplicate batch size {b}")));
        }
    }

    let m = points.len();
    let mut design = DMatrix::from_fn(m, cols, |i, j| (1.0 / points[i].0).powi((j + first_power) as i32));
    let y = DVector::from_iterator(m, points.iter().map(|p| p.1));
    let scales: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    for (j, s) in scales.iter().enumerate() {
        design.column_mut(j).unscale_mut(*s);
    }

    let sv = design.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > RANK_TOL * smax) {
        return Err(Error::RankDeficient(format!(
            "reciprocal condition {:.3e} of the scaled {m}x{cols} design",
            smin / smax
        )));
    }

    let qr = design.clone().qr();
    let qty = qr.q().transpose() * &y;
    let beta_scaled = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;

    let mut coefficients = vec![0.0; degree + 1];
    for j in 0..cols {
        coefficients[j + first_power] = beta_scaled[j] / scales[j];
    }
    let fitted = &design * &beta_scaled;
    let residual = ((&y - fitted).norm_squared() / m as f64).sqrt();
    Ok(PolyFit {
        degree,
        zero_intercept,
        coefficients,
        residual,
        condition: smax / smin,
    })
}

/// A free-intercept fit with a percentile bootstrap interval for `β₀`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterceptCheck {
    pub fit: PolyFit,
    pub beta0_ci_low: f64,
    pub beta0_ci_high: f64,
    pub level: f64,
}

impl InterceptCheck {
    pub fn contains_zero(&self) -> bool {
        self.beta0_ci_low <= 0.0 && 0.0 <= self.beta0_ci_high
    }
}

/// Fits `points` with a free intercept, then refits every bootstrap
/// replicate (`replicates[i][k]` is replicate `k` of `points[i].1`).
pub fn bootstrap_intercept(points: &[(f64, f64)], replicates: &[Vec<f64>], degree: usize, level: f64) -> Result<InterceptCheck> {
    if replicates.len() != points.len() {
        return Err(Error::DimensionMismatch {
            context: "bootstrap replicates",
            expected: points.len().to_string(),
            found: replicates.len().to_string(),
        });
    }
    let resamples = replicates.first().map_or(0, Vec::len);
    if resamples == 0 || replicates.iter().any(|r| r.len() != resamples) {
        return Err(invalid("replicates", "need the same non-zero number of replicates per point"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("level", format!("must lie in (0, 1), got {level}")));
    }
    let fit = fit_inverse_b_poly(points, degree, false)?;
    let mut beta0 = Vec::with_capacity(resamples);
    for k in 0..resamples {
        let pts: Vec<(f64, f64)> = points.iter().zip(replicates).map(|(&(b, _), r)| (b, r[k])).collect();
        beta0.push(fit_inverse_b_poly(&pts, degree, false)?.coefficients[0]);
    }
    beta0.sort_by(f64::total_cmp);
    Ok(InterceptCheck {
        fit,
        beta0_ci_low: quantile_sorted(&beta0, (1.0 - level) / 2.0),
        beta0_ci_high: quantile_sorted(&beta0, (1.0 + level) / 2.0),
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, LearningRateSchedule, RngStream};
    use crate::regression::{propagate_moments, variance_stochastic_gradient};
    use proptest::prelude::*;

    #[test]
    fn exact_three_over_b() {
        let pts: Vec<(f64, f64)> = (1..=6).map(|b| (b as f64, 3.0 / b as f64)).collect();
        let f = fit_inverse_b_poly(&pts, 2, true).unwrap();
        assert_eq!(f.coefficients[0], 0.0);
        assert!((f.coefficients[1] - 3.0).abs() < 1e-12);
        assert!(f.coefficients[2].abs() < 1e-12);
        assert!(f.residual <= 1e-12);
        assert!((f.evaluate(7.0) - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert!(fit_inverse_b_poly(&[(1.0, 1.0), (2.0, 0.5)], 2, false).is_err());
        assert!(fit_inverse_b_poly(&[(1.0, 1.0), (1.0, 0.5), (3.0, 0.1)], 1, false).is_err());
        assert!(fit_inverse_b_poly(&[(0.0, 1.0), (1.0, 0.5)], 1, false).is_err());
        let close = [(1000.0, 1.0), (1000.0 + 1e-9, 1.0), (1000.0 + 2e-9, 1.0), (1000.0 + 3e-9, 1.0)];
        assert!(matches!(fit_inverse_b_poly(&close, 3, false), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn recovers_exact_regression_polynomial() {
        let mut s = RngStream::new(31, 0);
        let n = 20;
        let d = Dataset::synthetic_gaussian(&mut s, n, 3, 0.5).unwrap();
        let w0 = DVector::from_fn(3, |_, _| s.standard_normal());
        let states = propagate_moments(&d, &w0, &LearningRateSchedule::inverse_iteration(0.05), 3).unwrap();
        let pts: Vec<(f64, f64)> = (1..=n)
            .map(|b| (b as f64, variance_stochastic_gradient(&states[3], &d, b).unwrap()))
            .collect();
        let f = fit_inverse_b_poly(&pts, 4, false).unwrap();
        let scale = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        assert!(f.residual <= 1e-8 * scale, "{} vs {scale}", f.residual);
    }

    #[test]
    fn intercept_interval_covers_zero_for_pure_inverse_terms() {
        let mut s = RngStream::new(32, 0);
        let bs = [4.0, 8.0, 16.0, 32.0];
        let truth = |b: f64| 2.0 / b + 3.0 / (b * b);
        let points: Vec<(f64, f64)> = bs.iter().map(|&b| (b, truth(b) * (1.0 + 0.01 * s.standard_normal()))).collect();
        let reps: Vec<Vec<f64>> = bs
            .iter()
            .map(|&b| (0..400).map(|_| truth(b) * (1.0 + 0.01 * s.standard_normal())).collect())
            .collect();
        let chk = bootstrap_intercept(&points, &reps, 2, 0.99).unwrap();
        assert!(chk.contains_zero(), "{chk:?}");
        let shifted: Vec<Vec<f64>> = reps.iter().map(|r| r.iter().map(|v| v + 1.0).collect()).collect();
        let shifted_pts: Vec<(f64, f64)> = points.iter().map(|&(b, v)| (b, v + 1.0)).collect();
        assert!(!bootstrap_intercept(&shifted_pts, &shifted, 2, 0.99).unwrap().contains_zero());
        assert!(bootstrap_intercept(&points, &reps[..2], 2, 0.99).is_err());
    }

    proptest! {
        #[test]
        fn superset_fit_recovers_polynomial(c1 in -5.0f64..5.0, c2 in -5.0f64..5.0, extra in 1usize..6) {
            let pts: Vec<(f64, f64)> = (1..=3 + extra)
                .map(|b| { let x = 1.0 / b as f64; (b as f64, c1 * x + c2 * x * x) })
                .collect();
            let f = fit_inverse_b_poly(&pts, 2, true).unwrap();
            prop_assert!((f.coefficients[1] - c1).abs() < 1e-9);
            prop_assert!((f.coefficients[2] - c2).abs() < 1e-9);
            prop_assert!(f.residual < 1e-10);
        }
    }
}
