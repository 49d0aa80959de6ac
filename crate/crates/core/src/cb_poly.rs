//! Polynomials in the batch factor `c_b = (n − b) / (b (n − 1))`.
//!
//! Every exact regression quantity is a polynomial in `c_b` whose
//! coefficients do not depend on `b`, so one propagation serves all batch
//! sizes. Coefficients are scalars or matrices.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Result};

/// Batch factor `c_b` for `n` samples and batch size `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CbFactor {
    pub n: usize,
    pub b: usize,
    pub value: f64,
}

pub fn cb_factor(n: usize, b: usize) -> Result<CbFactor> {
    if n < 2 {
        return Err(invalid("n", format!("need n >= 2, got {n}")));
    }
    if b < 1 || b > n {
        return Err(invalid("b", format!("batch size {b} outside [1, {n}]")));
    }
    let value = (n - b) as f64 / (b as f64 * (n - 1) as f64);
    Ok(CbFactor { n, b, value })
}

/// Ring operations needed of a polynomial coefficient.
pub trait Coefficient: Clone {
    fn zero_like(&self) -> Self;
    fn add_scaled(&mut self, other: &Self, s: f64);
    fn scaled(&self, s: f64) -> Self;
    fn product(&self, other: &Self) -> Self;
}

impl Coefficient for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, other: &Self, s: f64) {
        *self += s * other;
    }
    fn scaled(&self, s: f64) -> Self {
        self * s
    }
    fn product(&self, other: &Self) -> Self {
        self * other
    }
}

impl Coefficient for DMatrix<f64> {
    fn zero_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn add_scaled(&mut self, other: &Self, s: f64) {
        *self += other * s;
    }
    fn scaled(&self, s: f64) -> Self {
        self * s
    }
    fn product(&self, other: &Self) -> Self {
        self * other
    }
}

/// `Σ_k coeffs[k] · c^k`. Always holds at least one coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CbPolynomial<T> {
    coeffs: Vec<T>,
}

pub type ScalarCbPoly = CbPolynomial<f64>;
pub type MatrixCbPoly = CbPolynomial<DMatrix<f64>>;

impl<T: Coefficient> CbPolynomial<T> {
    pub fn constant(value: T) -> Self {
        Self { coeffs: vec![value] }
    }

    pub fn from_coeffs(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(invalid("coeffs", "a polynomial needs at least one coefficient"));
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Stored degree (trailing zero coefficients are kept).
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn evaluate(&self, c: f64) -> T {
        let mut iter = self.coeffs.iter().rev();
        let mut acc = iter.next().expect("non-empty").clone();
        for coeff in iter {
            acc = acc.scaled(c);
            acc.add_scaled(coeff, 1.0);
        }
        acc
    }

    pub fn add(&self, other: &Self) -> Self {
        self.add_scaled(other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add_scaled(other, -1.0)
    }

    /// `self + s · other`.
    pub fn add_scaled(&self, other: &Self, s: f64) -> Self {
        let len = self.coeffs.len().max(other.coeffs.len());
        let zero = self.coeffs[0].zero_like();
        let coeffs = (0..len)
            .map(|k| {
                let mut c = self.coeffs.get(k).cloned().unwrap_or_else(|| zero.clone());
                if let Some(o) = other.coeffs.get(k) {
                    c.add_scaled(o, s);
                }
                c
            })
            .collect();
        Self { coeffs }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|c| c.scaled(s))
    }

    /// Cauchy product.
    pub fn mul(&self, other: &Self) -> Self {
        let len = self.coeffs.len() + other.coeffs.len() - 1;
        let zero = self.coeffs[0].product(&other.coeffs[0]).zero_like();
        let mut coeffs = vec![zero; len];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                coeffs[i + j].add_scaled(&a.product(b), 1.0);
            }
        }
        Self { coeffs }
    }

    /// Multiplies by `c` (degree shift).
    pub fn times_c(&self) -> Self {
        let mut coeffs = Vec::with_capacity(self.coeffs.len() + 1);
        coeffs.push(self.coeffs[0].zero_like());
        coeffs.extend(self.coeffs.iter().cloned());
        Self { coeffs }
    }

    /// Applies a linear map to every coefficient.
    pub fn map<U: Coefficient>(&self, f: impl Fn(&T) -> U) -> CbPolynomial<U> {
        CbPolynomial {
            coeffs: self.coeffs.iter().map(f).collect(),
        }
    }
}

impl MatrixCbPoly {
    pub fn trace(&self) -> ScalarCbPoly {
        self.map(|m| m.trace())
    }

    pub fn transpose(&self) -> Self {
        self.map(|m| m.transpose())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Largest coefficientwise asymmetry `max |M − Mᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|m| (m - m.transpose()).amax())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngStream;
    use proptest::prelude::*;

    #[test]
    fn cb_factor_examples() {
        assert_eq!(cb_factor(5, 5).unwrap().value, 0.0);
        assert_eq!(cb_factor(5, 1).unwrap().value, 1.0);
        let v = cb_factor(500, 2).unwrap().value;
        assert!((v - 498.0 / 998.0).abs() < 1e-15);
        assert!((v - 0.498998).abs() < 1e-6);
    }

    #[test]
    fn cb_factor_errors() {
        assert!(cb_factor(1, 1).is_err());
        assert!(cb_factor(5, 0).is_err());
        assert!(cb_factor(5, 6).is_err());
    }

    proptest! {
        #[test]
        fn cb_factor_strictly_decreasing_in_unit_interval(n in 2usize..200) {
            let mut prev = f64::INFINITY;
            for b in 1..=n {
                let c = cb_factor(n, b).unwrap().value;
                prop_assert!((0.0..=1.0).contains(&c));
                prop_assert!(c < prev);
                prev = c;
            }
        }
    }

    fn random_poly(s: &mut RngStream, deg: usize, dim: usize) -> MatrixCbPoly {
        let coeffs = (0..=deg)
            .map(|_| DMatrix::from_fn(dim, dim, |_, _| s.standard_normal()))
            .collect();
        MatrixCbPoly::from_coeffs(coeffs).unwrap()
    }

    #[test]
    fn ring_axioms_pointwise() {
        let mut s = RngStream::new(42, 0);
        let cs = [0.0, 0.2, 0.5, 0.77, 1.0];
        for trial in 0..20 {
            let a = random_poly(&mut s, trial % 4, 3);
            let b = random_poly(&mut s, (trial + 1) % 3, 3);
            let c = random_poly(&mut s, 2, 3);
            for &x in &cs {
                let (ea, eb, ec) = (a.evaluate(x), b.evaluate(x), c.evaluate(x));
                let tol = 1e-11 * (1.0 + ea.norm() * eb.norm() * ec.norm());
                assert!((a.add(&b).evaluate(x) - (&ea + &eb)).norm() < tol);
                assert!((a.sub(&b).evaluate(x) - (&ea - &eb)).norm() < tol);
                assert!((a.scale(1.7).evaluate(x) - &ea * 1.7).norm() < tol);
                assert!((a.mul(&b).evaluate(x) - &ea * &eb).norm() < tol);
                assert!((a.times_c().evaluate(x) - &ea * x).norm() < tol);
                // associativity and distributivity
                let lhs = a.mul(&b).mul(&c).evaluate(x);
                let rhs = a.mul(&b.mul(&c)).evaluate(x);
                assert!((lhs - rhs).norm() < tol);
                let lhs = a.mul(&b.add(&c)).evaluate(x);
                let rhs = a.mul(&b).add(&a.mul(&c)).evaluate(x);
                assert!((lhs - rhs).norm() < tol);
            }
            assert_eq!(a.evaluate(0.0), a.coeffs()[0]);
        }
    }

    #[test]
    fn scalar_poly_evaluates_by_horner() {
        let p = ScalarCbPoly::from_coeffs(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(p.evaluate(0.0), 1.0);
        assert_eq!(p.evaluate(2.0), 1.0 - 4.0 + 12.0);
        assert_eq!(p.degree(), 2);
        assert!(ScalarCbPoly::from_coeffs(vec![]).is_err());
    }
}
