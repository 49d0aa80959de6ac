//! Exact variance of mini-batch SGD gradient estimators for least squares,
//! with brute-force references.

mod moments;
mod oracle;

pub use moments::{
    combination_norm_poly, monotonicity_table, propagate_moments, variance_full_gradient,
    variance_full_gradient_poly, variance_stochastic_gradient, variance_stochastic_gradient_poly,
    MomentState, MonotonicityTable, VarianceRow, MONOTONICITY_REL_TOL,
};
pub use oracle::{
    batch_enumeration_mean_gradient, batch_enumeration_second_moment, batch_second_moment_closed_form,
    term_tree_expectation, term_tree_polynomial, LinearCombTerm, ENUMERATION_LIMIT,
};
