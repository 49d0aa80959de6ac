//! Replicated SGD runs from shared initial weights with independent batch
//! streams, and variance estimates with bootstrap confidence intervals.
//!
//! Run `r` draws its batches from stream `r` under the master seed, so an
//! ensemble is a pure function of its configuration regardless of how runs
//! are scheduled across threads.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::rng::purpose;
use crate::data::{generate_gaussian_batch, Dataset, LearningRateSchedule, RngStream};
use crate::error::{invalid, Error, Result};
use crate::numeric::CompensatedSum;
use crate::two_layer::{conditional_variance_g1, conditional_variance_g2, gradient_pair, sgd_step, TwoLayerState};

/// Upper bound on stored values (`runs × (t_max + 1) × Σ dims`).
pub const MAX_RECORDED_VALUES: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Regression,
    TwoLayer,
}

#[derive(Debug, Clone, Copy)]
pub enum ModelConfig<'a> {
    Regression {
        dataset: &'a Dataset,
        w0: &'a DVector<f64>,
        schedule: LearningRateSchedule,
    },
    TwoLayer {
        init: &'a TwoLayerState,
        schedule: LearningRateSchedule,
    },
}

impl ModelConfig<'_> {
    pub fn tag(&self) -> ModelTag {
        match self {
            ModelConfig::Regression { .. } => ModelTag::Regression,
            ModelConfig::TwoLayer { .. } => ModelTag::TwoLayer,
        }
    }

    /// Recorded series names and their per-iteration dimensions.
    pub fn series_layout(&self) -> Vec<(&'static str, usize)> {
        match self {
            ModelConfig::Regression { dataset, .. } => vec![("g", dataset.p()), ("full_grad", dataset.p())],
            ModelConfig::TwoLayer { init, .. } => {
                let d = init.dims();
                vec![
                    ("g1", d.p1 * d.p),
                    ("g2", d.p2 * d.p1),
                    ("full_grad1", d.p1 * d.p),
                    ("full_grad2", d.p2 * d.p1),
                    ("cond_var_g1", 1),
                    ("cond_var_g2", 1),
                ]
            }
        }
    }
}

/// One recorded quantity; `data[(r·(t_max+1) + t)·dim + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: &'static str,
    pub dim: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEnsemble {
    pub model: ModelTag,
    pub b: usize,
    pub runs: usize,
    pub t_max: usize,
    pub master_seed: u64,
    series: Vec<Series>,
}

impl RunEnsemble {
    pub fn series(&self, name: &str) -> Result<&Series> {
        self.series
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| invalid("series", format!("no series named `{name}`")))
    }

    pub fn series_names(&self) -> Vec<&'static str> {
        self.series.iter().map(|s| s.name).collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::OutOfRange {
                index: t,
                len: self.t_max + 1,
            });
        }
        Ok(())
    }

    /// Value of run `r` at iteration `t`.
    pub fn value(&self, name: &str, r: usize, t: usize) -> Result<&[f64]> {
        self.check_t(t)?;
        if r >= self.runs {
            return Err(Error::OutOfRange { index: r, len: self.runs });
        }
        let s = self.series(name)?;
        let start = (r * (self.t_max + 1) + t) * s.dim;
        Ok(&s.data[start..start + s.dim])
    }

    /// Mean over runs of a scalar series at `t`.
    pub fn series_mean(&self, name: &str, t: usize) -> Result<f64> {
        let s = self.series(name)?;
        if s.dim != 1 {
            return Err(invalid("series", format!("`{name}` is not scalar")));
        }
        let mut acc = CompensatedSum::new();
        for r in 0..self.runs {
            acc.add(self.value(name, r, t)?[0]);
        }
        Ok(acc.value() / self.runs as f64)
    }
}

fn simulate_regression(
    dataset: &Dataset,
    w0: &DVector<f64>,
    schedule: &LearningRateSchedule,
    b: usize,
    t_max: usize,
    stream: &mut RngStream,
    out: &mut [Vec<f64>],
) -> Result<()> {
    let mut w = w0.clone();
    for t in 0..=t_max {
        let mut batch = stream.subset(dataset.n(), b);
        batch.sort_unstable();
        let g = dataset.batch_gradient(&batch, &w);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t });
        }
        out[0].extend(g.iter());
        out[1].extend(dataset.full_gradient(&w).iter());
        if t < t_max {
            w -= g * schedule.rate(t);
        }
    }
    Ok(())
}

fn simulate_two_layer(
    init: &TwoLayerState,
    schedule: &LearningRateSchedule,
    b: usize,
    t_max: usize,
    stream: &mut RngStream,
    out: &mut [Vec<f64>],
) -> Result<()> {
    let mut state = init.clone();
    let p = state.dims().p;
    for t in 0..=t_max {
        let x = generate_gaussian_batch(stream, b, p);
        let g = gradient_pair(&state, &x)?;
        if g.g1.iter().chain(g.g2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t });
        }
        let full = state.full_gradient();
        out[0].extend(g.g1.iter());
        out[1].extend(g.g2.iter());
        out[2].extend(full.g1.iter());
        out[3].extend(full.g2.iter());
        out[4].push(conditional_variance_g1(&state, b)?);
        out[5].push(conditional_variance_g2(&state, b)?);
        if t < t_max {
            state = sgd_step(&state, &x, schedule.rate(t))?;
        }
    }
    Ok(())
}

/// `runs` independent trajectories of `t_max + 1` iterations each.
pub fn run_ensemble(model: &ModelConfig, b: usize, runs: usize, t_max: usize, master_seed: u64) -> Result<RunEnsemble> {
    if runs < 2 {
        return Err(invalid("runs", format!("need at least 2 runs, got {runs}")));
    }
    if b == 0 {
        return Err(invalid("b", "batch size must be >= 1"));
    }
    if let ModelConfig::Regression { dataset, w0, .. } = model {
        if b > dataset.n() {
            return Err(invalid("b", format!("batch size {b} exceeds n = {}", dataset.n())));
        }
        if w0.len() != dataset.p() {
            return Err(invalid("w0", "dimension differs from dataset"));
        }
    }
    let layout = model.series_layout();
    let per_iter: usize = layout.iter().map(|(_, d)| d).sum();
    let total = (runs as u128) * (t_max as u128 + 1) * per_iter as u128;
    if total > MAX_RECORDED_VALUES as u128 {
        return Err(Error::GuardExceeded {
            count: total,
            limit: MAX_RECORDED_VALUES as u128,
        });
    }

    let per_run: Vec<Vec<Vec<f64>>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut stream = RngStream::new(master_seed, r as u64);
            let mut out: Vec<Vec<f64>> = layout.iter().map(|(_, d)| Vec::with_capacity(d * (t_max + 1))).collect();
            match model {
                ModelConfig::Regression { dataset, w0, schedule } => {
                    simulate_regression(dataset, w0, schedule, b, t_max, &mut stream, &mut out)?
                }
                ModelConfig::TwoLayer { init, schedule } => {
                    simulate_two_layer(init, schedule, b, t_max, &mut stream, &mut out)?
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let series = layout
        .iter()
        .enumerate()
        .map(|(k, &(name, dim))| {
            let mut data = Vec::with_capacity(runs * (t_max + 1) * dim);
            for run in &per_run {
                data.extend_from_slice(&run[k]);
            }
            Series { name, dim, data }
        })
        .collect();

    Ok(RunEnsemble {
        model: model.tag(),
        b,
        runs,
        t_max,
        master_seed,
        series,
    })
}

/// Two-sided standard normal quantile for a central `level` interval.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    check_level(level)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("level", format!("must lie in (0, 1), got {level}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub halfwidth: f64,
    pub level: f64,
}

impl MeanEstimate {
    pub fn contains(&self, value: f64) -> bool {
        (self.mean - value).abs() <= self.halfwidth
    }
}

/// Sample mean with a normal-theory interval.
pub fn mean_with_ci(values: &[f64], level: f64) -> Result<MeanEstimate> {
    if values.len() < 2 {
        return Err(invalid("values", "need at least 2 values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().copied().collect::<CompensatedSum>().value() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).collect::<CompensatedSum>().value();
    let std_err = (ss / (n - 1.0) / n).sqrt();
    let halfwidth = normal_critical_value(level)? * std_err;
    Ok(MeanEstimate {
        mean,
        std_err,
        halfwidth,
        level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceEstimate {
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl VarianceEstimate {
    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn contains(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-run values at `t`, centered by their mean across runs, laid out run
/// by run as `[t-block][dim]`, plus squared norms.
struct Centered {
    dim: usize,
    ts: usize,
    vecs: Vec<f64>,
    sq: Vec<f64>,
}

fn centered(ens: &RunEnsemble, name: &str, ts: &[usize]) -> Result<Centered> {
    let s = ens.series(name)?;
    for &t in ts {
        ens.check_t(t)?;
    }
    let dim = s.dim;
    let mut means = vec![vec![0.0; dim]; ts.len()];
    for (j, &t) in ts.iter().enumerate() {
        for k in 0..dim {
            let mut acc = CompensatedSum::new();
            for r in 0..ens.runs {
                acc.add(s.data[(r * (ens.t_max + 1) + t) * dim + k]);
            }
            means[j][k] = acc.value() / ens.runs as f64;
        }
    }
    let mut vecs = Vec::with_capacity(ens.runs * ts.len() * dim);
    let mut sq = Vec::with_capacity(ens.runs * ts.len());
    for r in 0..ens.runs {
        for (j, &t) in ts.iter().enumerate() {
            let start = (r * (ens.t_max + 1) + t) * dim;
            let mut norm = 0.0;
            for k in 0..dim {
                let v = s.data[start + k] - means[j][k];
                vecs.push(v);
                norm += v * v;
            }
            sq.push(norm);
        }
    }
    Ok(Centered {
        dim,
        ts: ts.len(),
        vecs,
        sq,
    })
}

/// Unbiased `(1/(R−1)) Σ_r ‖v_r − v̄‖²` over the runs listed in `idx`.
fn variance_over(c: &Centered, idx: impl Iterator<Item = usize> + Clone, j: usize) -> f64 {
    let mut sum = vec![0.0; c.dim];
    let mut sq = 0.0;
    let mut count = 0usize;
    for r in idx {
        let start = (r * c.ts + j) * c.dim;
        for (acc, v) in sum.iter_mut().zip(&c.vecs[start..start + c.dim]) {
            *acc += v;
        }
        sq += c.sq[r * c.ts + j];
        count += 1;
    }
    let n = count as f64;
    let mean_sq: f64 = sum.iter().map(|v| v * v).sum::<f64>() / n;
    ((sq - mean_sq) / (n - 1.0)).max(0.0)
}

fn bootstrap_stream(ens: &RunEnsemble) -> RngStream {
    RngStream::new(ens.master_seed, purpose::BOOTSTRAP + ((ens.b as u64) << 16))
}

/// Point estimates at each `t` in `ts` and `resamples` bootstrap replicates
/// (`replicates[k][j]` for resample `k`, iteration `ts[j]`). Runs are
/// resampled jointly across iterations.
pub fn bootstrap_replicates(ens: &RunEnsemble, name: &str, ts: &[usize], resamples: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if resamples == 0 {
        return Err(invalid("resamples", "need at least one resample"));
    }
    let c = centered(ens, name, ts)?;
    let point: Vec<f64> = (0..ts.len()).map(|j| variance_over(&c, 0..ens.runs, j)).collect();
    let mut stream = bootstrap_stream(ens);
    let mut idx = vec![0usize; ens.runs];
    let mut reps = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for v in idx.iter_mut() {
            *v = stream.index(ens.runs);
        }
        reps.push((0..ts.len()).map(|j| variance_over(&c, idx.iter().copied(), j)).collect());
    }
    Ok((point, reps))
}

/// Variance `E‖g_t‖² − ‖E g_t‖²` across runs at every `t ≤ t_max`, with
/// percentile bootstrap intervals.
pub fn empirical_variance_all(ens: &RunEnsemble, name: &str, resamples: usize, level: f64) -> Result<Vec<VarianceEstimate>> {
    check_level(level)?;
    let ts: Vec<usize> = (0..=ens.t_max).collect();
    let (point, reps) = bootstrap_replicates(ens, name, &ts, resamples)?;
    Ok((0..ts.len())
        .map(|j| {
            let mut col: Vec<f64> = reps.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            VarianceEstimate {
                variance: point[j],
                ci_low: quantile_sorted(&col, (1.0 - level) / 2.0),
                ci_high: quantile_sorted(&col, (1.0 + level) / 2.0),
            }
        })
        .collect())
}

pub fn empirical_variance(ens: &RunEnsemble, name: &str, t: usize, resamples: usize, level: f64) -> Result<VarianceEstimate> {
    check_level(level)?;
    let (point, reps) = bootstrap_replicates(ens, name, &[t], resamples)?;
    let mut col: Vec<f64> = reps.iter().map(|r| r[0]).collect();
    col.sort_by(f64::total_cmp);
    Ok(VarianceEstimate {
        variance: point[0],
        ci_low: quantile_sorted(&col, (1.0 - level) / 2.0),
        ci_high: quantile_sorted(&col, (1.0 + level) / 2.0),
    })
}

/// Powers of two together with multiples of `⌈n/12⌉`, restricted to `[2, n]`
/// and sorted.
pub fn figure_batch_grid(n: usize) -> Vec<usize> {
    let step = n.div_ceil(12).max(1);
    let mut grid: Vec<usize> = (1..)
        .map(|k| 1usize << k)
        .take_while(|&b| b <= n)
        .chain((1..).map(|k| k * step).take_while(|&b| b <= n))
        .filter(|&b| b >= 2)
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}
