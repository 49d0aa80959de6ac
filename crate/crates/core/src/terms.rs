//! Multiplicative terms: ordered products of symbolic matrices and their
//! transposes, and sums of trace products `Σ coeff · Π tr(M_k) · M_0`.
//!
//! Terms are plain values checked against a [`SymbolTable`] when built. The
//! empty product is the identity of the term's (square) dimension.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type SymbolId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolKind {
    Parameter,
    Constant,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Symbol {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: SymbolKind,
    /// `Some((u, v))` when the symbol stands for the outer product `u vᵀ`.
    pub rank_one: Option<(SymbolId, SymbolId)>,
}

#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    symbols: Vec<Symbol>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, symbol: Symbol) -> SymbolId {
        self.symbols.push(symbol);
        self.symbols.len() - 1
    }

    pub fn parameter(&mut self, name: &str, rows: usize, cols: usize) -> SymbolId {
        self.push(Symbol {
            name: name.into(),
            rows,
            cols,
            kind: SymbolKind::Parameter,
            rank_one: None,
        })
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize) -> SymbolId {
        self.push(Symbol {
            name: name.into(),
            rows,
            cols,
            kind: SymbolKind::Constant,
            rank_one: None,
        })
    }

    pub fn identity(&mut self, dim: usize) -> SymbolId {
        self.push(Symbol {
            name: "I".into(),
            rows: dim,
            cols: dim,
            kind: SymbolKind::Identity,
            rank_one: None,
        })
    }

    /// Column vector parameter.
    pub fn vector(&mut self, name: &str, dim: usize) -> SymbolId {
        self.parameter(name, dim, 1)
    }

    /// Rank-one parameter `u vᵀ`.
    pub fn rank_one(&mut self, name: &str, u: SymbolId, v: SymbolId) -> Result<SymbolId> {
        let (ur, vr) = (self.get(u)?.rows, self.get(v)?.rows);
        Ok(self.push(Symbol {
            name: name.into(),
            rows: ur,
            cols: vr,
            kind: SymbolKind::Parameter,
            rank_one: Some((u, v)),
        }))
    }

    pub fn get(&self, id: SymbolId) -> Result<&Symbol> {
        self.symbols.get(id).ok_or_else(|| Error::UnknownSymbol(format!("#{id}")))
    }

    pub fn lookup(&self, name: &str) -> Result<SymbolId> {
        self.symbols
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSymbol(name.into()))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolRef {
    pub id: SymbolId,
    pub transposed: bool,
}

impl SymbolRef {
    pub fn new(id: SymbolId) -> Self {
        Self { id, transposed: false }
    }

    pub fn t(id: SymbolId) -> Self {
        Self { id, transposed: true }
    }

    fn flipped(self) -> Self {
        Self {
            id: self.id,
            transposed: !self.transposed,
        }
    }
}

fn oriented_dims(table: &SymbolTable, r: SymbolRef) -> Result<(usize, usize)> {
    let s = table.get(r.id)?;
    Ok(if r.transposed { (s.cols, s.rows) } else { (s.rows, s.cols) })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiplicativeTerm {
    factors: Vec<SymbolRef>,
    rows: usize,
    cols: usize,
}

impl MultiplicativeTerm {
    /// Checks that adjacent factors chain. Must be non-empty; use
    /// [`MultiplicativeTerm::identity`] for the empty product.
    pub fn new(table: &SymbolTable, factors: Vec<SymbolRef>) -> Result<Self> {
        let Some(&first) = factors.first() else {
            return Err(Error::MalformedPattern("empty product needs an explicit dimension".into()));
        };
        let mut canon = Vec::with_capacity(factors.len());
        let (rows, mut cols) = oriented_dims(table, first)?;
        for (k, &f) in factors.iter().enumerate() {
            let (r, c) = oriented_dims(table, f)?;
            if k > 0 && r != cols {
                return Err(Error::DimensionMismatch {
                    context: "multiplicative term chain",
                    expected: format!("{cols} rows at factor {k}"),
                    found: r.to_string(),
                });
            }
            cols = c;
            let identity = table.get(f.id)?.kind == SymbolKind::Identity;
            canon.push(if identity { SymbolRef::new(f.id) } else { f });
        }
        Ok(Self {
            factors: canon,
            rows,
            cols,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            factors: Vec::new(),
            rows: dim,
            cols: dim,
        }
    }

    pub fn factors(&self) -> &[SymbolRef] {
        &self.factors
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Occurrences of `symbol` or its transpose.
    pub fn degree(&self, table: &SymbolTable, symbol: SymbolId) -> Result<usize> {
        table.get(symbol)?;
        Ok(self.factors.iter().filter(|f| f.id == symbol).count())
    }

    /// Number of parameter factors.
    pub fn total_degree(&self, table: &SymbolTable) -> Result<usize> {
        let mut d = 0;
        for f in &self.factors {
            if table.get(f.id)?.kind == SymbolKind::Parameter {
                d += 1;
            }
        }
        Ok(d)
    }

    fn flip(table: &SymbolTable, f: SymbolRef) -> SymbolRef {
        match table.get(f.id) {
            Ok(sym) if sym.kind == SymbolKind::Identity => f,
            _ => f.flipped(),
        }
    }

    pub fn transpose(&self, table: &SymbolTable) -> Self {
        Self {
            factors: self.factors.iter().rev().map(|&f| Self::flip(table, f)).collect(),
            rows: self.cols,
            cols: self.rows,
        }
    }

    /// Drops identity factors.
    pub fn normalized(&self, table: &SymbolTable) -> Result<Self> {
        let mut factors = Vec::with_capacity(self.factors.len());
        for &f in &self.factors {
            if table.get(f.id)?.kind != SymbolKind::Identity {
                factors.push(f);
            }
        }
        Ok(Self {
            factors,
            rows: self.rows,
            cols: self.cols,
        })
    }

    /// Rewrites `tr(M₁ · u vᵀ · M₂)` as `vᵀ (M₂ M₁) u`, splitting the square
    /// term at a rank-one factor.
    pub fn rotate_trace(&self, table: &SymbolTable, pivot: usize) -> Result<TraceRotation> {
        let &f = self.factors.get(pivot).ok_or(Error::OutOfRange {
            index: pivot,
            len: self.factors.len(),
        })?;
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                context: "trace rotation",
                expected: "square term".into(),
                found: format!("{}x{}", self.rows, self.cols),
            });
        }
        let (u, v) = table.get(f.id)?.rank_one.ok_or(Error::NotRankOne { index: pivot })?;
        let (u, v) = if f.transposed { (v, u) } else { (u, v) };
        let factors: Vec<SymbolRef> = self.factors[pivot + 1..]
            .iter()
            .chain(self.factors[..pivot].iter())
            .copied()
            .collect();
        let rotated = if factors.is_empty() {
            MultiplicativeTerm::identity(table.get(u)?.rows)
        } else {
            MultiplicativeTerm::new(table, factors)?
        };
        Ok(TraceRotation {
            left: v,
            rotated,
            right: u,
        })
    }

    pub fn evaluate(&self, table: &SymbolTable, bindings: &Bindings) -> Result<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for &f in &self.factors {
            let m = bound_value(table, bindings, f.id)?;
            let m = if f.transposed { m.transpose() } else { m };
            acc = Some(match acc {
                None => m,
                Some(a) => a * m,
            });
        }
        Ok(acc.unwrap_or_else(|| DMatrix::identity(self.rows, self.cols)))
    }

    pub fn display(&self, table: &SymbolTable) -> String {
        if self.factors.is_empty() {
            return "I".into();
        }
        self.factors
            .iter()
            .map(|f| {
                let name = table.get(f.id).map(|s| s.name.clone()).unwrap_or_else(|_| format!("#{}", f.id));
                if f.transposed {
                    format!("{name}ᵀ")
                } else {
                    name
                }
            })
            .collect::<Vec<_>>()
            .join("·")
    }

    /// Representative of `{rotations of M} ∪ {rotations of Mᵀ}`, all of which
    /// have the same trace.
    pub fn canonical_trace_form(&self, table: &SymbolTable) -> Self {
        let n = self.factors.len();
        if n == 0 {
            return self.clone();
        }
        let reversed = self.transpose(table).factors;
        let mut best: Vec<SymbolRef> = self.factors.clone();
        for seq in [&self.factors, &reversed] {
            for k in 0..n {
                let cand: Vec<SymbolRef> = seq[k..].iter().chain(seq[..k].iter()).copied().collect();
                if cand < best {
                    best = cand;
                }
            }
        }
        Self {
            factors: best,
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Result of [`MultiplicativeTerm::rotate_trace`]: `tr(M) = leftᵀ · rotated · right`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRotation {
    pub left: SymbolId,
    pub rotated: MultiplicativeTerm,
    pub right: SymbolId,
}

pub type Bindings = HashMap<SymbolId, DMatrix<f64>>;

fn bound_value(table: &SymbolTable, bindings: &Bindings, id: SymbolId) -> Result<DMatrix<f64>> {
    let s = table.get(id)?;
    if s.kind == SymbolKind::Identity {
        return Ok(DMatrix::identity(s.rows, s.cols));
    }
    let value = match (bindings.get(&id), s.rank_one) {
        (Some(m), _) => m.clone(),
        (None, Some((u, v))) => bound_value(table, bindings, u)? * bound_value(table, bindings, v)?.transpose(),
        (None, None) => return Err(Error::UnboundSymbol(s.name.clone())),
    };
    if value.shape() != (s.rows, s.cols) {
        return Err(Error::DimensionMismatch {
            context: "symbol binding",
            expected: format!("{}: {}x{}", s.name, s.rows, s.cols),
            found: format!("{}x{}", value.nrows(), value.ncols()),
        });
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceProductTerm {
    pub coefficient: f64,
    pub trace_factors: Vec<MultiplicativeTerm>,
    pub chain: MultiplicativeTerm,
}

/// `Σ_i coeff_i · Π_k tr(M_ik) · M_i0` with a common outer shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceProductSum {
    rows: usize,
    cols: usize,
    terms: Vec<TraceProductTerm>,
}

impl TraceProductSum {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, term: TraceProductTerm) -> Result<()> {
        if let Some(bad) = term.trace_factors.iter().find(|m| !m.is_square()) {
            return Err(Error::DimensionMismatch {
                context: "trace factor",
                expected: "square".into(),
                found: format!("{}x{}", bad.rows, bad.cols),
            });
        }
        if term.chain.shape() != (self.rows, self.cols) {
            return Err(Error::DimensionMismatch {
                context: "chain factor",
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", term.chain.rows, term.chain.cols),
            });
        }
        self.terms.push(term);
        Ok(())
    }

    pub fn terms(&self) -> &[TraceProductTerm] {
        &self.terms
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn evaluate(&self, table: &SymbolTable, bindings: &Bindings) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(self.rows, self.cols);
        for term in &self.terms {
            let mut scalar = term.coefficient;
            for m in &term.trace_factors {
                scalar *= m.evaluate(table, bindings)?.trace();
            }
            acc += term.chain.evaluate(table, bindings)? * scalar;
        }
        Ok(acc)
    }

    /// Puts every trace factor in canonical rotation, sorts, and merges terms
    /// that become identical. Zero-coefficient terms are dropped.
    pub fn canonicalized(&self, table: &SymbolTable) -> Self {
        type Key = (Vec<Vec<SymbolRef>>, Vec<SymbolRef>);
        let mut merged: Vec<(Key, TraceProductTerm)> = Vec::new();
        for term in &self.terms {
            let mut traces: Vec<MultiplicativeTerm> =
                term.trace_factors.iter().map(|m| m.canonical_trace_form(table)).collect();
            traces.sort_by(|a, b| (a.factors.len(), &a.factors).cmp(&(b.factors.len(), &b.factors)));
            let key: Key = (traces.iter().map(|m| m.factors.clone()).collect(), term.chain.factors.clone());
            match merged.iter_mut().find(|(k, _)| *k == key) {
                Some((_, existing)) => existing.coefficient += term.coefficient,
                None => merged.push((
                    key,
                    TraceProductTerm {
                        coefficient: term.coefficient,
                        trace_factors: traces,
                        chain: term.chain.clone(),
                    },
                )),
            }
        }
        merged.sort_by(|a, b| a.0.cmp(&b.0));
        Self {
            rows: self.rows,
            cols: self.cols,
            terms: merged
                .into_iter()
                .map(|(_, t)| t)
                .filter(|t| t.coefficient != 0.0)
                .collect(),
        }
    }

    /// e.g. `2·tr(A·Bᵀ)·tr(C)·[A·I·B]`; the zero sum prints as `0`.
    pub fn display(&self, table: &SymbolTable) -> String {
        if self.terms.is_empty() {
            return "0".into();
        }
        let mut out = String::new();
        for (k, term) in self.terms.iter().enumerate() {
            if k > 0 {
                out.push_str(" + ");
            }
            if term.coefficient != 1.0 {
                let _ = write!(out, "{}·", term.coefficient);
            }
            for m in &term.trace_factors {
                let _ = write!(out, "tr({})·", m.display(table));
            }
            let _ = write!(out, "[{}]", term.chain.display(table));
        }
        out
    }
}
