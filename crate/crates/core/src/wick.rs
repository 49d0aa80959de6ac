//! Expectations of `x_{i₁} x_{i₁'}ᵀ A₁ x_{i₂} x_{i₂'}ᵀ ⋯ A_{m−1} x_{i_m} x_{i_m'}ᵀ`
//! for independent standard normal vectors `x_i ∈ ℝᵖ`, by Isserlis pairing.
//!
//! Vector slots are numbered `0..2m`. Slot `0` is the open row end and slot
//! `2m − 1` the open column end; `A_j` sits between slot `2j − 1` and slot
//! `2j`. Only slots carrying the same sample index can pair.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::data::RngStream;
use crate::error::{invalid, Error, Result};
use crate::terms::{Bindings, MultiplicativeTerm, SymbolId, SymbolKind, SymbolRef, SymbolTable, TraceProductSum, TraceProductTerm};

pub const MAX_FACTORS: usize = 5;

/// Sample-label patterns with `m ≤ 4`, single- and multi-index, all of even
/// parity.
pub const CATALOGUE: [&[usize]; 12] = [
    &[0, 0],
    &[0, 0, 0, 0],
    &[0, 1, 1, 0],
    &[0, 1, 0, 1],
    &[0, 0, 1, 1],
    &[0, 0, 0, 0, 0, 0],
    &[0, 0, 1, 1, 0, 0],
    &[0, 1, 2, 2, 1, 0],
    &[0, 1, 1, 2, 2, 0],
    &[0, 0, 0, 0, 0, 0, 0, 0],
    &[0, 1, 0, 1, 2, 2, 3, 3],
    &[0, 0, 1, 1, 1, 1, 0, 0],
];

/// Patterns with an odd appearance count.
pub const ODD_CATALOGUE: [&[usize]; 4] = [&[0, 1], &[0, 0, 0, 1], &[0, 1, 1, 1, 2, 2], &[0, 0, 1, 2, 2, 2, 1, 0]];
pub const MIN_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPattern {
    dim: usize,
    interleave: Vec<SymbolId>,
    index_assignment: Vec<usize>,
}

impl MomentPattern {
    /// `interleave` holds `A₁..A_{m−1}`; `index_assignment` the `2m` sample
    /// labels `(i₁, i₁', …, i_m, i_m')`.
    pub fn new(table: &SymbolTable, dim: usize, interleave: Vec<SymbolId>, index_assignment: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::MalformedPattern("dimension must be positive".into()));
        }
        if index_assignment.len() < 2 || index_assignment.len() % 2 != 0 {
            return Err(Error::MalformedPattern(format!(
                "need an even, non-zero number of slots, got {}",
                index_assignment.len()
            )));
        }
        let m = index_assignment.len() / 2;
        if interleave.len() + 1 != m {
            return Err(Error::MalformedPattern(format!(
                "{m} rank-one factors need {} interleaved matrices, got {}",
                m - 1,
                interleave.len()
            )));
        }
        for &id in &interleave {
            let s = table.get(id)?;
            if (s.rows, s.cols) != (dim, dim) {
                return Err(Error::DimensionMismatch {
                    context: "interleaved matrix",
                    expected: format!("{dim}x{dim}"),
                    found: format!("{}: {}x{}", s.name, s.rows, s.cols),
                });
            }
        }
        Ok(Self {
            dim,
            interleave,
            index_assignment,
        })
    }

    /// `x xᵀ A₁ x xᵀ ⋯ A_{m−1} x xᵀ` with a single sample.
    pub fn single_sample(table: &SymbolTable, dim: usize, interleave: Vec<SymbolId>) -> Result<Self> {
        let slots = 2 * (interleave.len() + 1);
        Self::new(table, dim, interleave, vec![0; slots])
    }

    pub fn m(&self) -> usize {
        self.index_assignment.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn interleave(&self) -> &[SymbolId] {
        &self.interleave
    }

    pub fn index_assignment(&self) -> &[usize] {
        &self.index_assignment
    }

    /// Slots grouped by sample label, in label order.
    pub fn index_classes(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (slot, &label) in self.index_assignment.iter().enumerate() {
            classes.entry(label).or_default().push(slot);
        }
        classes
    }

    /// Appearance count per sample label.
    pub fn appearance_counts(&self) -> BTreeMap<usize, usize> {
        self.index_classes().into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    pub fn has_even_parity(&self) -> bool {
        self.appearance_counts().values().all(|c| c % 2 == 0)
    }
}

/// All perfect matchings of `slots`, each as a list of pairs.
fn perfect_matchings(slots: &[usize]) -> Vec<Vec<(usize, usize)>> {
    if slots.is_empty() {
        return vec![Vec::new()];
    }
    let first = slots[0];
    let mut out = Vec::new();
    for k in 1..slots.len() {
        let rest: Vec<usize> = slots[1..].iter().enumerate().filter(|&(j, _)| j + 1 != k).map(|(_, &s)| s).collect();
        for mut tail in perfect_matchings(&rest) {
            tail.insert(0, (first, slots[k]));
            out.push(tail);
        }
    }
    out
}

/// Crossing `A_j` from a slot lands on its partner slot. Entering on the row
/// side reads `A_j`, on the column side `A_jᵀ`.
fn cross_matrix(pattern: &MomentPattern, slot: usize) -> (SymbolRef, usize) {
    let j = slot.div_ceil(2);
    let id = pattern.interleave[j - 1];
    if slot % 2 == 1 {
        (SymbolRef::new(id), slot + 1)
    } else {
        (SymbolRef::t(id), slot - 1)
    }
}

fn contract(table: &SymbolTable, pattern: &MomentPattern, partner: &[usize]) -> Result<TraceProductTerm> {
    let last = partner.len() - 1;
    let mut visited = vec![false; partner.len()];
    let as_term = |factors: Vec<SymbolRef>| {
        if factors.is_empty() {
            Ok(MultiplicativeTerm::identity(pattern.dim))
        } else {
            MultiplicativeTerm::new(table, factors)
        }
    };

    let mut chain = Vec::new();
    visited[0] = true;
    let mut at = partner[0];
    visited[at] = true;
    while at != last {
        let (f, next) = cross_matrix(pattern, at);
        chain.push(f);
        visited[next] = true;
        at = partner[next];
        visited[at] = true;
    }

    let mut traces = Vec::new();
    for start in 1..last {
        if visited[start] {
            continue;
        }
        let mut factors = Vec::new();
        let mut at = start;
        loop {
            visited[at] = true;
            let (f, next) = cross_matrix(pattern, at);
            factors.push(f);
            visited[next] = true;
            at = partner[next];
            if at == start {
                break;
            }
        }
        traces.push(as_term(factors)?);
    }

    Ok(TraceProductTerm {
        coefficient: 1.0,
        trace_factors: traces,
        chain: as_term(chain)?,
    })
}

/// Number of matchings the expansion visits: `Π (β − 1)!!` over index
/// classes of size `β` (zero when some class is odd).
pub fn matching_count(pattern: &MomentPattern) -> u128 {
    pattern
        .appearance_counts()
        .values()
        .map(|&c| if c % 2 == 1 { 0 } else { (1..c as u128).step_by(2).product::<u128>() })
        .product()
}

/// Symbolic `E[pattern]` as a canonical trace-product sum over the
/// interleaved symbols. Odd appearance counts give the zero sum.
pub fn wick_expectation(table: &SymbolTable, pattern: &MomentPattern) -> Result<TraceProductSum> {
    if pattern.m() > MAX_FACTORS {
        return Err(Error::GuardExceeded {
            count: pattern.m() as u128,
            limit: MAX_FACTORS as u128,
        });
    }
    let p = pattern.dim;
    let mut sum = TraceProductSum::zero(p, p);
    if !pattern.has_even_parity() {
        return Ok(sum);
    }

    let class_matchings: Vec<Vec<Vec<(usize, usize)>>> =
        pattern.index_classes().values().map(|slots| perfect_matchings(slots)).collect();
    let mut choice = vec![0usize; class_matchings.len()];
    let mut partner = vec![0usize; pattern.index_assignment.len()];
    loop {
        for (class, &k) in class_matchings.iter().zip(&choice) {
            for &(a, b) in &class[k] {
                partner[a] = b;
                partner[b] = a;
            }
        }
        sum.push(contract(table, pattern, &partner)?)?;

        // odometer over the per-class choices
        let mut pos = 0;
        loop {
            if pos == choice.len() {
                return Ok(sum.canonicalized(table));
            }
            choice[pos] += 1;
            if choice[pos] < class_matchings[pos].len() {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}

/// `tr E[x xᵀ A x xᵀ] = (p + 2) tr(A)`. Holds for any square `A`, since
/// `tr(Aᵀ) = tr(A)`.
pub fn trace_of_quartic(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            context: "trace_of_quartic",
            expected: "square matrix".into(),
            found: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok((a.nrows() as f64 + 2.0) * a.trace())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mean: DMatrix<f64>,
    /// Entrywise standard error of the mean.
    pub std_err: DMatrix<f64>,
    pub samples: usize,
}

impl MomentEstimate {
    /// Largest `|mean − exact| / std_err` over entries. Entries with zero
    /// standard error count as infinite unless they match exactly.
    pub fn max_z_score(&self, exact: &DMatrix<f64>) -> f64 {
        self.mean
            .iter()
            .zip(exact.iter())
            .zip(self.std_err.iter())
            .map(|((m, e), s)| {
                let d = (m - e).abs();
                if d == 0.0 {
                    0.0
                } else if *s == 0.0 {
                    f64::INFINITY
                } else {
                    d / s
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Monte Carlo mean of the pattern with entrywise standard errors. Fresh
/// vectors are drawn per sample label, in label order.
pub fn mc_moment_estimate(
    table: &SymbolTable,
    pattern: &MomentPattern,
    bindings: &Bindings,
    sample_count: usize,
    stream: &mut RngStream,
) -> Result<MomentEstimate> {
    if sample_count < MIN_MC_SAMPLES {
        return Err(invalid("sample_count", format!("need at least {MIN_MC_SAMPLES}, got {sample_count}")));
    }
    let p = pattern.dim;
    let mut mats = Vec::with_capacity(pattern.interleave.len());
    for &id in &pattern.interleave {
        let s = table.get(id)?;
        let value = match s.kind {
            SymbolKind::Identity => DMatrix::identity(p, p),
            _ => MultiplicativeTerm::new(table, vec![SymbolRef::new(id)])?.evaluate(table, bindings)?,
        };
        mats.push(value);
    }
    let labels: Vec<usize> = pattern.index_classes().into_keys().collect();
    let slot_vec: Vec<usize> = pattern
        .index_assignment
        .iter()
        .map(|l| labels.binary_search(l).expect("label present"))
        .collect();
    let last = slot_vec.len() - 1;

    let mut xs: Vec<DVector<f64>> = vec![DVector::zeros(p); labels.len()];
    let mut sum = DMatrix::<f64>::zeros(p, p);
    let mut sum_sq = DMatrix::<f64>::zeros(p, p);
    let mut chunk = DMatrix::<f64>::zeros(p, p);
    let mut chunk_sq = DMatrix::<f64>::zeros(p, p);
    const CHUNK: usize = 4096;
    for k in 0..sample_count {
        for x in xs.iter_mut() {
            stream.fill_normal(x.as_mut_slice());
        }
        let mut scalar = 1.0;
        for (j, a) in mats.iter().enumerate() {
            let left = &xs[slot_vec[2 * j + 1]];
            let right = &xs[slot_vec[2 * j + 2]];
            scalar *= left.dot(&(a * right));
        }
        let (u, v) = (&xs[slot_vec[0]], &xs[slot_vec[last]]);
        for c in 0..p {
            for r in 0..p {
                let val = scalar * u[r] * v[c];
                chunk[(r, c)] += val;
                chunk_sq[(r, c)] += val * val;
            }
        }
        if (k + 1) % CHUNK == 0 || k + 1 == sample_count {
            sum += &chunk;
            sum_sq += &chunk_sq;
            chunk.fill(0.0);
            chunk_sq.fill(0.0);
        }
    }
    let n = sample_count as f64;
    let mean = &sum / n;
    let std_err = DMatrix::from_fn(p, p, |r, c| {
        let var = ((sum_sq[(r, c)] - n * mean[(r, c)] * mean[(r, c)]) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    });
    Ok(MomentEstimate {
        mean,
        std_err,
        samples: sample_count,
    })
}
