//! Online mini-batch SGD for the two-layer linear teacher–student model
//! `x ↦ W₂ W₁ x` with `x ~ N(0, I_p)`, trained on the population loss
//! `½ E‖(W₂W₁ − W₂*W₁*) x‖² = ½‖𝒲‖_F²`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::rng::purpose;
use crate::data::{generate_gaussian_batch, LearningRateSchedule, RngStream};
use crate::error::{invalid, Error, Result};
use crate::mc::{mean_with_ci, MeanEstimate};
use crate::numeric::frob2;
use crate::polyfit::{bootstrap_intercept, InterceptCheck};

/// Layer widths: input `p`, hidden `p1`, output `p2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub p: usize,
    pub p1: usize,
    pub p2: usize,
}

impl Dims {
    pub const DESK: Dims = Dims { p: 8, p1: 16, p2: 8 };
    pub const FULL: Dims = Dims { p: 64, p1: 256, p2: 128 };

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.p1 == 0 || self.p2 == 0 {
            return Err(invalid("dims", format!("all widths must be positive, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerState {
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    w1_star: DMatrix<f64>,
    w2_star: DMatrix<f64>,
    gap: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
}

fn shape_check(context: &'static str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch {
            context,
            expected: format!("{rows}x{cols}"),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

fn scaled_gaussian(stream: &mut RngStream, rows: usize, cols: usize) -> DMatrix<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    generate_gaussian_batch(stream, rows, cols) * scale
}

impl TwoLayerState {
    /// `w1`: `p1 × p`, `w2`: `p2 × p1`; teacher matrices likewise.
    pub fn new(w1: DMatrix<f64>, w2: DMatrix<f64>, w1_star: DMatrix<f64>, w2_star: DMatrix<f64>) -> Result<Self> {
        let (p1, p) = w1.shape();
        let p2 = w2.nrows();
        shape_check("W2", &w2, p2, p1)?;
        shape_check("W1*", &w1_star, w1_star.nrows(), p)?;
        shape_check("W2*", &w2_star, p2, w1_star.nrows())?;
        if [&w1, &w2, &w1_star, &w2_star].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(invalid("weights", "all entries must be finite"));
        }
        let gap = &w2 * &w1 - &w2_star * &w1_star;
        Ok(Self {
            w1,
            w2,
            w1_star,
            w2_star,
            gap,
        })
    }

    /// Student and teacher with i.i.d. `N(0, 1/fan_in)` entries. The student
    /// comes from the `INIT_WEIGHTS` stream and the teacher from
    /// `TEACHER_WEIGHTS`, both under `master_seed`.
    pub fn random(dims: Dims, master_seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut s = RngStream::new(master_seed, purpose::INIT_WEIGHTS);
        let w1 = scaled_gaussian(&mut s, dims.p1, dims.p);
        let w2 = scaled_gaussian(&mut s, dims.p2, dims.p1);
        let mut s = RngStream::new(master_seed, purpose::TEACHER_WEIGHTS);
        let w1_star = scaled_gaussian(&mut s, dims.p1, dims.p);
        let w2_star = scaled_gaussian(&mut s, dims.p2, dims.p1);
        Self::new(w1, w2, w1_star, w2_star)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            p: self.w1.ncols(),
            p1: self.w1.nrows(),
            p2: self.w2.nrows(),
        }
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn w1_star(&self) -> &DMatrix<f64> {
        &self.w1_star
    }

    pub fn w2_star(&self) -> &DMatrix<f64> {
        &self.w2_star
    }

    /// `𝒲 = W₂W₁ − W₂*W₁*`.
    pub fn gap(&self) -> &DMatrix<f64> {
        &self.gap
    }

    /// Population gradients `(W₂ᵀ𝒲, 𝒲W₁ᵀ)`.
    pub fn full_gradient(&self) -> GradientPair {
        GradientPair {
            g1: self.w2.transpose() * &self.gap,
            g2: &self.gap * self.w1.transpose(),
        }
    }
}

/// `½‖𝒲‖_F²`.
pub fn population_loss(state: &TwoLayerState) -> f64 {
    0.5 * frob2(state.gap())
}

/// Mini-batch gradients for a `b × p` batch (one sample per row):
/// `g1 = W₂ᵀ𝒲 Σ̂`, `g2 = 𝒲 Σ̂ W₁ᵀ` with `Σ̂ = XᵀX / b`.
pub fn gradient_pair(state: &TwoLayerState, batch: &DMatrix<f64>) -> Result<GradientPair> {
    let p = state.w1.ncols();
    if batch.ncols() != p || batch.nrows() == 0 {
        return Err(Error::DimensionMismatch {
            context: "two-layer batch",
            expected: format!("b x {p} with b >= 1"),
            found: format!("{}x{}", batch.nrows(), batch.ncols()),
        });
    }
    let sigma = batch.transpose() * batch / batch.nrows() as f64;
    let gs = &state.gap * sigma;
    Ok(GradientPair {
        g1: state.w2.transpose() * &gs,
        g2: gs * state.w1.transpose(),
    })
}

/// Simultaneous update of both layers from the pre-step weights.
pub fn sgd_step(state: &TwoLayerState, batch: &DMatrix<f64>, alpha: f64) -> Result<TwoLayerState> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
    }
    let g = gradient_pair(state, batch)?;
    let w1 = &state.w1 - g.g1 * alpha;
    let w2 = &state.w2 - g.g2 * alpha;
    let gap = &w2 * &w1 - &state.w2_star * &state.w1_star;
    Ok(TwoLayerState {
        w1,
        w2,
        w1_star: state.w1_star.clone(),
        w2_star: state.w2_star.clone(),
        gap,
    })
}

fn check_b(b: usize) -> Result<()> {
    if b == 0 {
        return Err(invalid("b", "batch size must be >= 1"));
    }
    Ok(())
}

/// `Var(g1 | W) = ((p + 1) / b) ‖W₂ᵀ𝒲‖_F²`.
pub fn conditional_variance_g1(state: &TwoLayerState, b: usize) -> Result<f64> {
    check_b(b)?;
    let p = state.w1.ncols() as f64;
    Ok((p + 1.0) / b as f64 * frob2(&(state.w2.transpose() * &state.gap)))
}

/// `Var(g2 | W) = (1/b)[2 tr(𝒲ᵀ𝒲 W₁ᵀW₁) + ‖𝒲‖²‖W₁‖² − ‖𝒲W₁ᵀ‖²]`.
pub fn conditional_variance_g2(state: &TwoLayerState, b: usize) -> Result<f64> {
    check_b(b)?;
    let g = &state.gap;
    let w1 = &state.w1;
    let cross = (g.transpose() * g * (w1.transpose() * w1)).trace();
    let v = 2.0 * cross + frob2(g) * frob2(w1) - frob2(&(g * w1.transpose()));
    Ok(v / b as f64)
}

/// Monte Carlo check of the conditional variances at a fixed state:
/// averages `‖g_i − E g_i‖²` over `batches` fresh size-`b` batches.
pub fn mc_conditional_variance(
    state: &TwoLayerState,
    b: usize,
    batches: usize,
    level: f64,
    stream: &mut RngStream,
) -> Result<(MeanEstimate, MeanEstimate)> {
    check_b(b)?;
    if batches < 2 {
        return Err(invalid("batches", "need at least 2 batches"));
    }
    let full = state.full_gradient();
    let p = state.w1.ncols();
    let mut d1 = Vec::with_capacity(batches);
    let mut d2 = Vec::with_capacity(batches);
    for _ in 0..batches {
        let x = generate_gaussian_batch(stream, b, p);
        let g = gradient_pair(state, &x)?;
        d1.push(frob2(&(g.g1 - &full.g1)));
        d2.push(frob2(&(g.g2 - &full.g2)));
    }
    Ok((mean_with_ci(&d1, level)?, mean_with_ci(&d2, level)?))
}

/// Configuration of a variance-versus-batch-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dims: Dims,
    /// Seed for the shared initial student and the teacher.
    pub init_seed: u64,
    pub schedule: LearningRateSchedule,
    pub batch_sizes: Vec<usize>,
    pub t_max: usize,
    pub runs: usize,
    /// Seed for the per-run batch streams and bootstrap.
    pub master_seed: u64,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    /// Iterations at which `Var` versus `1/b` is fitted with a free intercept.
    #[serde(default)]
    pub fit_times: Vec<usize>,
    #[serde(default = "default_fit_degree")]
    pub fit_degree: usize,
}

fn default_fit_degree() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub t: usize,
    pub b: usize,
    pub var_g1: f64,
    pub var_g1_ci: f64,
    pub var_g2: f64,
    pub var_g2_ci: f64,
    pub cond_var_g1_mean: f64,
    pub cond_var_g2_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFit {
    pub series: &'static str,
    pub t: usize,
    pub check: InterceptCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// Ordered by `b`, then `t`.
    pub rows: Vec<SweepRow>,
    pub fits: Vec<SweepFit>,
}

impl SweepResult {
    pub fn row(&self, b: usize, t: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.b == b && r.t == t)
    }
}

pub const MIN_SWEEP_RUNS: usize = 100;

/// Replicated online-SGD runs from shared initial weights for every batch
/// size. CI columns are bootstrap half-widths; the intercept fits reuse the
/// same bootstrap replicates.
pub fn variance_sweep(config: &SweepConfig) -> Result<SweepResult> {
    use crate::mc::{bootstrap_replicates, quantile_sorted, run_ensemble, ModelConfig};
    if config.runs < MIN_SWEEP_RUNS {
        return Err(invalid("runs", format!("need at least {MIN_SWEEP_RUNS}, got {}", config.runs)));
    }
    if config.batch_sizes.is_empty() {
        return Err(invalid("batch_sizes", "must not be empty"));
    }
    if let Some(&t) = config.fit_times.iter().find(|&&t| t > config.t_max) {
        return Err(Error::OutOfRange {
            index: t,
            len: config.t_max + 1,
        });
    }
    config.schedule.validate()?;
    let init = TwoLayerState::random(config.dims, config.init_seed)?;
    let ts: Vec<usize> = (0..=config.t_max).collect();
    let (lo_q, hi_q) = ((1.0 - config.ci_level) / 2.0, (1.0 + config.ci_level) / 2.0);

    let mut rows = Vec::new();
    // per series: per b, (point estimates, replicates) over all t
    let mut boot: [Vec<(Vec<f64>, Vec<Vec<f64>>)>; 2] = [Vec::new(), Vec::new()];
    for &b in &config.batch_sizes {
        let model = ModelConfig::TwoLayer {
            init: &init,
            schedule: config.schedule,
        };
        let ens = run_ensemble(&model, b, config.runs, config.t_max, config.master_seed)?;
        let mut halfwidths = [vec![0.0; ts.len()], vec![0.0; ts.len()]];
        for (k, name) in ["g1", "g2"].into_iter().enumerate() {
            let (point, reps) = bootstrap_replicates(&ens, name, &ts, config.bootstrap_resamples)?;
            for t in 0..ts.len() {
                let mut col: Vec<f64> = reps.iter().map(|r| r[t]).collect();
                col.sort_by(f64::total_cmp);
                halfwidths[k][t] = 0.5 * (quantile_sorted(&col, hi_q) - quantile_sorted(&col, lo_q));
            }
            boot[k].push((point, reps));
        }
        for t in 0..=config.t_max {
            rows.push(SweepRow {
                t,
                b,
                var_g1: boot[0].last().expect("pushed").0[t],
                var_g1_ci: halfwidths[0][t],
                var_g2: boot[1].last().expect("pushed").0[t],
                var_g2_ci: halfwidths[1][t],
                cond_var_g1_mean: ens.series_mean("cond_var_g1", t)?,
                cond_var_g2_mean: ens.series_mean("cond_var_g2", t)?,
            });
        }
    }

    let mut fits = Vec::new();
    for (k, series) in ["g1", "g2"].into_iter().enumerate() {
        for &t in &config.fit_times {
            let points: Vec<(f64, f64)> = config
                .batch_sizes
                .iter()
                .zip(&boot[k])
                .map(|(&b, (point, _))| (b as f64, point[t]))
                .collect();
            let reps: Vec<Vec<f64>> = boot[k].iter().map(|(_, r)| r.iter().map(|v| v[t]).collect()).collect();
            let check = bootstrap_intercept(&points, &reps, config.fit_degree, config.ci_level)?;
            fits.push(SweepFit { series, t, check });
        }
    }
    Ok(SweepResult { rows, fits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w1: f64, w2: f64, w1s: f64, w2s: f64) -> TwoLayerState {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        TwoLayerState::new(m(w1), m(w2), m(w1s), m(w2s)).unwrap()
    }

    fn random_state(seed: u64, dims: Dims) -> TwoLayerState {
        TwoLayerState::random(dims, seed).unwrap()
    }

    #[test]
    fn zero_gap_gives_zero_gradients() {
        let s = random_state(1, Dims { p: 3, p1: 4, p2: 2 });
        let same = TwoLayerState::new(s.w1.clone(), s.w2.clone(), s.w1.clone(), s.w2.clone()).unwrap();
        let mut rng = RngStream::new(1, 0);
        let x = generate_gaussian_batch(&mut rng, 5, 3);
        let g = gradient_pair(&same, &x).unwrap();
        assert_eq!(g.g1.amax(), 0.0);
        assert_eq!(g.g2.amax(), 0.0);
        assert_eq!(sgd_step(&same, &x, 0.3).unwrap(), same);
        assert_eq!(conditional_variance_g1(&same, 3).unwrap(), 0.0);
        assert_eq!(conditional_variance_g2(&same, 3).unwrap(), 0.0);
    }

    #[test]
    fn scalar_hand_values() {
        let s = scalar(2.0, 1.0, 0.0, 0.0);
        let x = DMatrix::from_element(1, 1, 1.5);
        let g = gradient_pair(&s, &x).unwrap();
        assert_eq!(g.g1[(0, 0)], 2.0 * 2.25);
        assert_eq!(g.g2[(0, 0)], 4.0 * 2.25);
        let next = sgd_step(&s, &DMatrix::from_element(1, 1, 1.0), 0.1).unwrap();
        assert!((next.w1[(0, 0)] - 1.8).abs() < 1e-15);
        assert!((next.w2[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((next.gap[(0, 0)] - 1.08).abs() < 1e-15);
        assert_eq!(conditional_variance_g1(&s, 1).unwrap(), 8.0);
        assert_eq!(conditional_variance_g2(&s, 1).unwrap(), 32.0);
    }

    #[test]
    fn zero_step_is_identity_and_negative_rejected() {
        let s = random_state(2, Dims { p: 3, p1: 2, p2: 2 });
        let mut rng = RngStream::new(2, 0);
        let x = generate_gaussian_batch(&mut rng, 4, 3);
        assert_eq!(sgd_step(&s, &x, 0.0).unwrap(), s);
        assert!(sgd_step(&s, &x, -0.1).is_err());
    }

    #[test]
    fn dimension_errors() {
        let s = random_state(3, Dims { p: 3, p1: 2, p2: 2 });
        assert!(gradient_pair(&s, &DMatrix::zeros(2, 4)).is_err());
        assert!(TwoLayerState::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 3), DMatrix::zeros(2, 3), DMatrix::zeros(2, 2)).is_err());
        assert!(conditional_variance_g1(&s, 0).is_err());
    }

    #[test]
    fn gap_cache_stays_consistent() {
        let mut s = random_state(4, Dims { p: 4, p1: 5, p2: 3 });
        let mut rng = RngStream::new(4, 0);
        for t in 0..30 {
            let x = generate_gaussian_batch(&mut rng, 3, 4);
            s = sgd_step(&s, &x, 0.05 / (t as f64 + 1.0)).unwrap();
            let fresh = s.w2() * s.w1() - s.w2_star() * s.w1_star();
            assert!((&fresh - s.gap()).amax() <= 1e-12);
        }
    }

    #[test]
    fn variance_halves_when_b_doubles() {
        let s = random_state(5, Dims { p: 3, p1: 4, p2: 2 });
        for b in [1usize, 3, 7] {
            assert_eq!(conditional_variance_g1(&s, 2 * b).unwrap() * 2.0, conditional_variance_g1(&s, b).unwrap());
            let (a, c) = (conditional_variance_g2(&s, 2 * b).unwrap() * 2.0, conditional_variance_g2(&s, b).unwrap());
            assert!((a - c).abs() <= 1e-15 * c);
        }
    }

    #[test]
    fn gradients_unbiased_and_loss_matches_mc() {
        let s = random_state(6, Dims { p: 3, p1: 4, p2: 2 });
        let full = s.full_gradient();
        let mut rng = RngStream::new(6, 0);
        let n = 200_000;
        let mut sum1 = DMatrix::zeros(4, 3);
        let mut sum2 = DMatrix::zeros(2, 4);
        let mut loss = Vec::with_capacity(n);
        for _ in 0..n {
            let x = generate_gaussian_batch(&mut rng, 1, 3);
            let g = gradient_pair(&s, &x).unwrap();
            sum1 += g.g1;
            sum2 += g.g2;
            let r = s.gap() * x.transpose();
            loss.push(0.5 * r.norm_squared());
        }
        let m1 = sum1 / n as f64;
        let m2 = sum2 / n as f64;
        // loose elementwise bound: 6 standard errors of the single-sample spread
        let sd1 = conditional_variance_g1(&s, 1).unwrap().sqrt();
        let sd2 = conditional_variance_g2(&s, 1).unwrap().sqrt();
        assert!((m1 - &full.g1).amax() < 6.0 * sd1 / (n as f64).sqrt());
        assert!((m2 - &full.g2).amax() < 6.0 * sd2 / (n as f64).sqrt());
        let est = mean_with_ci(&loss, 0.99).unwrap();
        assert!((est.mean - population_loss(&s)).abs() < 2.0 * est.halfwidth);
    }

    #[test]
    fn conditional_variance_matches_mc() {
        let s = random_state(7, Dims { p: 3, p1: 4, p2: 2 });
        let mut rng = RngStream::new(7, 0);
        for b in [1usize, 2] {
            let (v1, v2) = mc_conditional_variance(&s, b, 100_000, 0.999, &mut rng).unwrap();
            let e1 = conditional_variance_g1(&s, b).unwrap();
            let e2 = conditional_variance_g2(&s, b).unwrap();
            assert!(v1.contains(e1), "{v1:?} vs {e1}");
            assert!(v2.contains(e2), "{v2:?} vs {e2}");
        }
    }

    #[test]
    fn sweep_rejects_few_runs() {
        let cfg = SweepConfig {
            dims: Dims { p: 2, p1: 2, p2: 2 },
            init_seed: 1,
            schedule: LearningRateSchedule::inverse_iteration(0.1),
            batch_sizes: vec![1, 2],
            t_max: 2,
            runs: 1,
            master_seed: 1,
            bootstrap_resamples: 100,
            ci_level: 0.99,
            fit_times: vec![],
            fit_degree: 2,
        };
        assert!(variance_sweep(&cfg).is_err());
    }

    #[test]
    fn sweep_at_t0_matches_conditional_variance() {
        let cfg = SweepConfig {
            dims: Dims { p: 3, p1: 4, p2: 3 },
            init_seed: 8,
            schedule: LearningRateSchedule::inverse_iteration(0.1),
            batch_sizes: vec![2, 8],
            t_max: 2,
            runs: 20_000,
            master_seed: 8,
            bootstrap_resamples: 300,
            ci_level: 0.99,
            fit_times: vec![0],
            fit_degree: 1,
        };
        let res = variance_sweep(&cfg).unwrap();
        let rows = &res.rows;
        assert_eq!(rows.len(), 6);
        assert_eq!(res.fits.len(), 2);
        // heavy tails make percentile intervals optimistic; allow twice the width
        for r in rows.iter().filter(|r| r.t == 0) {
            assert!((r.var_g1 - r.cond_var_g1_mean).abs() <= 2.0 * r.var_g1_ci, "{r:?}");
            assert!((r.var_g2 - r.cond_var_g2_mean).abs() <= 2.0 * r.var_g2_ci, "{r:?}");
        }
        let at = |b: usize, t: usize| rows.iter().find(|r| r.b == b && r.t == t).unwrap().clone();
        for t in 0..=2 {
            assert!(at(8, t).var_g1 < at(2, t).var_g1);
            assert!(at(8, t).var_g2 < at(2, t).var_g2);
        }
    }
}
