//! Runs one configured experiment and writes its tables, fits and manifest.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::config::{validate_batch_sizes, DatasetSource, ExperimentConfig, ExperimentKind, LoadedConfig, MomentsConfig, RegressionConfig, TwoLayerConfig};
use super::plot::{emit_plot_data, log10_or_neg_inf, Cell, Table};
use crate::cb_poly::cb_factor;
use crate::data::rng::purpose;
use crate::data::{load_csv_dataset, Dataset, RngStream};
use crate::mc::{empirical_variance_all, figure_batch_grid, run_ensemble, ModelConfig};
use crate::polyfit::{fit_inverse_b_poly, PolyFit};
use crate::regression::{
    batch_enumeration_second_moment, combination_norm_poly, batch_second_moment_closed_form, monotonicity_table, propagate_moments,
    term_tree_polynomial, variance_full_gradient, variance_stochastic_gradient, variance_stochastic_gradient_poly,
    LinearCombTerm,
};
use crate::terms::{Bindings, SymbolTable};
use crate::two_layer::{variance_sweep, SweepConfig};
use crate::wick::{mc_moment_estimate, trace_of_quartic, wick_expectation, MomentPattern, CATALOGUE, ODD_CATALOGUE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub assertions: Vec<Assertion>,
}

impl RunOutcome {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    master_seed: u64,
    outputs: Vec<String>,
    assertions: &'a [Assertion],
    all_passed: bool,
}

/// The configuration as executed: overrides applied and CSV paths made
/// absolute so the manifest's echo can be re-run from anywhere.
pub fn effective_config(loaded: &LoadedConfig, overrides: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut c = loaded.config.clone();
    if let Some(dir) = &overrides.output_dir {
        c.output_dir = dir.clone();
    }
    if let Some(seed) = overrides.seed {
        c.master_seed = seed;
    }
    if let Some(r) = c.regression.as_mut() {
        if let DatasetSource::Csv(src) = &mut r.dataset {
            if src.path.is_relative() {
                let joined = loaded.base_dir().join(&src.path);
                src.path = joined.canonicalize().with_context(|| format!("dataset {}", joined.display()))?;
            }
        }
    }
    Ok(c)
}

pub fn run_experiment(loaded: &LoadedConfig, overrides: &Overrides) -> anyhow::Result<RunOutcome> {
    let config = effective_config(loaded, overrides)?;
    let out = config.output_dir.clone();
    let mut files: Vec<(String, Table)> = Vec::new();
    let mut json: Vec<(String, serde_json::Value)> = Vec::new();
    let assertions = match config.experiment {
        ExperimentKind::Regression => {
            let r = config.regression.as_ref().expect("validated");
            regression(loaded, r, config.master_seed, &mut files, &mut json)?
        }
        ExperimentKind::TwoLayer => {
            let t = config.two_layer.as_ref().expect("validated");
            two_layer(t, config.master_seed, &mut files, &mut json)?
        }
        ExperimentKind::Moments => {
            let m = config.moments.as_ref().expect("validated");
            moments(m, config.master_seed, &mut files, &mut json)?
        }
    };

    let refs: Vec<(&str, &Table)> = files.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut written = emit_plot_data(&out, &refs)?;
    for (name, value) in &json {
        let path = out.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    let manifest_path = out.join("manifest.json");
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: &config,
        master_seed: config.master_seed,
        outputs: written
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        assertions: &assertions,
        all_passed: assertions.iter().all(|a| a.passed),
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    written.push(manifest_path);
    Ok(RunOutcome {
        output_dir: out,
        files: written,
        assertions,
    })
}

fn load_dataset(loaded: &LoadedConfig, r: &RegressionConfig, seed: u64) -> anyhow::Result<Dataset> {
    Ok(match &r.dataset {
        DatasetSource::Csv(src) => {
            let path = if src.path.is_relative() {
                loaded.base_dir().join(&src.path)
            } else {
                src.path.clone()
            };
            load_csv_dataset(&path, &src.options())?
        }
        DatasetSource::Synthetic { n, p, noise } => {
            let mut s = RngStream::new(seed, purpose::SYNTHETIC_DATA);
            Dataset::synthetic_gaussian(&mut s, *n, *p, *noise)?
        }
        DatasetSource::Inline { features, targets } => {
            let n = features.len();
            let p = features.first().map_or(0, Vec::len);
            if features.iter().any(|row| row.len() != p) {
                bail!("dataset.inline.features: rows have different lengths");
            }
            let flat: Vec<f64> = features.iter().flatten().copied().collect();
            Dataset::new(DMatrix::from_row_slice(n, p, &flat), DVector::from_vec(targets.clone()))?
        }
    })
}

fn regression(
    loaded: &LoadedConfig,
    r: &RegressionConfig,
    seed: u64,
    files: &mut Vec<(String, Table)>,
    json: &mut Vec<(String, serde_json::Value)>,
) -> anyhow::Result<Vec<Assertion>> {
    let dataset = load_dataset(loaded, r, seed)?;
    let (n, p) = (dataset.n(), dataset.p());
    validate_batch_sizes(loaded, n)?;
    let w0 = match &r.w0 {
        Some(w) if w.len() != p => bail!("regression.w0: length {} differs from the dataset dimension {p}", w.len()),
        Some(w) => DVector::from_vec(w.clone()),
        None => {
            let mut s = RngStream::new(seed, purpose::INIT_WEIGHTS);
            DVector::from_fn(p, |_, _| s.standard_normal())
        }
    };
    let states = propagate_moments(&dataset, &w0, &r.schedule, r.t_max)?;
    let mut assertions = Vec::new();

    let mut exact = Table::new(&["t", "b", "var_g", "var_full_grad"]);
    let mut fig1a = Table::new(&["t", "b", "log10_var_g", "log10_var_fullgrad"]);
    let mut exact_g: HashMap<(usize, usize), f64> = HashMap::new();
    for st in &states {
        for &b in &r.batch_sizes {
            let vg = variance_stochastic_gradient(st, &dataset, b)?;
            let vf = variance_full_gradient(st, &dataset, b)?;
            exact_g.insert((st.t, b), vg);
            exact.push(vec![st.t.into(), b.into(), vg.into(), vf.into()]);
            fig1a.push(vec![st.t.into(), b.into(), log10_or_neg_inf(vg).into(), log10_or_neg_inf(vf).into()]);
        }
    }

    let mut mono = Table::new(&["t", "var_g_non_increasing", "var_full_grad_non_increasing", "min_gap_g", "min_gap_full_grad"]);
    let mut bad_t = Vec::new();
    for t in 0..=r.t_max {
        let m = monotonicity_table(&states, &dataset, t)?;
        if !(m.var_g_non_increasing && m.var_full_grad_non_increasing) {
            bad_t.push(t);
        }
        mono.push(vec![
            t.into(),
            m.var_g_non_increasing.into(),
            m.var_full_grad_non_increasing.into(),
            m.min_gap_g.into(),
            m.min_gap_full_grad.into(),
        ]);
    }
    assertions.push(Assertion::new(
        "exact_variances_non_increasing_in_b",
        bad_t.is_empty(),
        if bad_t.is_empty() {
            format!("b = 1..{n}, t = 0..{}", r.t_max)
        } else {
            format!("increase found at t = {bad_t:?}")
        },
    ));

    let mut grid = vec![1];
    grid.extend(figure_batch_grid(n));
    grid.dedup();
    let mut fig1b = Table::new(&["t", "b", "var_g", "fitted_var_g"]);
    let mut fits = Vec::new();
    for st in &states {
        let points: Vec<(f64, f64)> = grid
            .iter()
            .map(|&b| Ok((b as f64, variance_stochastic_gradient(st, &dataset, b)?)))
            .collect::<crate::Result<_>>()?;
        let degree = (st.t + 1).min(points.len() - 1);
        let fit = fit_inverse_b_poly(&points, degree, false);
        for &(b, v) in &points {
            let fitted = fit.as_ref().map_or(f64::NAN, |f| f.evaluate(b));
            fig1b.push(vec![st.t.into(), (b as usize).into(), v.into(), fitted.into()]);
        }
        #[derive(Serialize)]
        struct FitRecord {
            t: usize,
            var_g_coefficients_in_cb: Vec<f64>,
            fit: Option<PolyFit>,
            fit_error: Option<String>,
        }
        let poly = variance_stochastic_gradient_poly(st, &dataset)?;
        let (fit, fit_error) = match fit {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        fits.push(FitRecord {
            t: st.t,
            var_g_coefficients_in_cb: poly.coeffs().to_vec(),
            fit,
            fit_error,
        });
    }

    files.push(("regression_variance".into(), exact));
    files.push(("monotonicity".into(), mono));
    files.push(("fig1a".into(), fig1a));
    files.push(("fig1b".into(), fig1b));
    json.push(("polyfit".into(), serde_json::to_value(&fits)?));

    if r.runs >= 2 {
        let mut mc = Table::new(&["b", "t", "var", "ci_low", "ci_high", "exact"]);
        let scale = exact_g.values().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut misses = Vec::new();
        let mut by_b: Vec<(usize, Vec<f64>)> = Vec::new();
        let model = ModelConfig::Regression {
            dataset: &dataset,
            w0: &w0,
            schedule: r.schedule,
        };
        for &b in &r.batch_sizes {
            let ens = run_ensemble(&model, b, r.runs, r.t_max, seed)?;
            let est = empirical_variance_all(&ens, "g", r.bootstrap_resamples, r.ci_level)?;
            for (t, e) in est.iter().enumerate() {
                let x = exact_g[&(t, b)];
                let inside = e.contains(x) || (e.ci_high - e.ci_low == 0.0 && (x - e.variance).abs() <= 1e-10 * scale);
                if !inside {
                    misses.push((t, b));
                }
                mc.push(vec![b.into(), t.into(), e.variance.into(), e.ci_low.into(), e.ci_high.into(), x.into()]);
            }
            by_b.push((b, est.iter().map(|e| e.variance).collect()));
        }
        assertions.push(Assertion::new(
            "mc_interval_covers_exact",
            misses.is_empty(),
            if misses.is_empty() {
                format!("{} cells at level {}", r.batch_sizes.len() * (r.t_max + 1), r.ci_level)
            } else {
                format!("exact value outside interval at (t, b) = {misses:?}")
            },
        ));
        by_b.sort_by_key(|(b, _)| *b);
        let mut disorder = Vec::new();
        for t in 0..=r.t_max {
            for w in by_b.windows(2) {
                if w[1].1[t] > w[0].1[t] {
                    disorder.push((t, w[0].0, w[1].0));
                }
            }
        }
        assertions.push(Assertion::new(
            "mc_variances_ordered_by_b",
            disorder.is_empty(),
            if disorder.is_empty() {
                "larger b never has larger empirical variance".to_string()
            } else {
                format!("increases at (t, b, b') = {disorder:?}")
            },
        ));
        files.push(("mc_variance".into(), mc));
    }
    Ok(assertions)
}

/// Delta-method half-width of `log10 v`.
fn log10_halfwidth(v: f64, halfwidth: f64) -> f64 {
    if v > 0.0 {
        halfwidth / (v * std::f64::consts::LN_10)
    } else {
        f64::NAN
    }
}

fn two_layer(
    t: &TwoLayerConfig,
    seed: u64,
    files: &mut Vec<(String, Table)>,
    json: &mut Vec<(String, serde_json::Value)>,
) -> anyhow::Result<Vec<Assertion>> {
    let sweep = SweepConfig {
        dims: t.effective_dims(),
        init_seed: seed,
        schedule: t.schedule,
        batch_sizes: t.batch_sizes.clone(),
        t_max: t.t_max,
        runs: t.runs,
        master_seed: seed,
        bootstrap_resamples: t.bootstrap_resamples,
        ci_level: t.ci_level,
        fit_times: t.fit_times.clone(),
        fit_degree: t.fit_degree,
    };
    let res = variance_sweep(&sweep)?;

    let mut table = Table::new(&[
        "t",
        "b",
        "var_g1",
        "var_g1_ci",
        "var_g2",
        "var_g2_ci",
        "cond_var_g1_mean",
        "cond_var_g2_mean",
    ]);
    let mut fig2a = Table::new(&["t", "b", "log10_var_g1", "ci"]);
    let mut fig2b = Table::new(&["t", "b", "log10_var_g2", "ci"]);
    let mut rows = res.rows.clone();
    rows.sort_by_key(|r| (r.t, r.b));
    for r in &rows {
        table.push(vec![
            r.t.into(),
            r.b.into(),
            r.var_g1.into(),
            r.var_g1_ci.into(),
            r.var_g2.into(),
            r.var_g2_ci.into(),
            r.cond_var_g1_mean.into(),
            r.cond_var_g2_mean.into(),
        ]);
        fig2a.push(vec![r.t.into(), r.b.into(), log10_or_neg_inf(r.var_g1).into(), log10_halfwidth(r.var_g1, r.var_g1_ci).into()]);
        fig2b.push(vec![r.t.into(), r.b.into(), log10_or_neg_inf(r.var_g2).into(), log10_halfwidth(r.var_g2, r.var_g2_ci).into()]);
    }

    let mut sizes: Vec<usize> = t.batch_sizes.iter().copied().filter(|&b| b >= t.monotone_from).collect();
    sizes.sort_unstable();
    let mut increases = Vec::new();
    for step in 0..=t.t_max {
        for w in sizes.windows(2) {
            let (lo, hi) = (res.row(w[0], step).expect("row"), res.row(w[1], step).expect("row"));
            if hi.var_g1 > lo.var_g1 {
                increases.push(format!("g1 t={step} b={}->{}", w[0], w[1]));
            }
            if hi.var_g2 > lo.var_g2 {
                increases.push(format!("g2 t={step} b={}->{}", w[0], w[1]));
            }
        }
    }
    let mut assertions = vec![Assertion::new(
        "empirical_variances_non_increasing_in_b",
        increases.is_empty(),
        if increases.is_empty() {
            format!("b in {sizes:?}, t = 0..{}", t.t_max)
        } else {
            increases.join("; ")
        },
    )];
    for f in &res.fits {
        assertions.push(Assertion::new(
            format!("intercept_interval_contains_zero_{}_t{}", f.series, f.t),
            f.check.contains_zero(),
            format!(
                "beta0 = {:.6e}, {} interval [{:.6e}, {:.6e}]",
                f.check.fit.coefficients[0], f.check.level, f.check.beta0_ci_low, f.check.beta0_ci_high
            ),
        ));
    }

    files.push(("two_layer_variance".into(), table));
    files.push(("fig2a".into(), fig2a));
    files.push(("fig2b".into(), fig2b));
    json.push(("polyfit_two_layer".into(), serde_json::to_value(&res.fits)?));
    json.push((
        "two_layer_meta".into(),
        serde_json::json!({
            "dims": sweep.dims,
            "init_seed": sweep.init_seed,
            "master_seed": sweep.master_seed,
            "schedule": sweep.schedule,
            "runs": sweep.runs,
        }),
    ));
    Ok(assertions)
}

fn random_matrix(s: &mut RngStream, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |_, _| s.standard_normal())
}

/// Symbolic-versus-Monte-Carlo checks over the given label patterns.
fn moments(
    m: &MomentsConfig,
    seed: u64,
    files: &mut Vec<(String, Table)>,
    json: &mut Vec<(String, serde_json::Value)>,
) -> anyhow::Result<Vec<Assertion>> {
    let p = m.dim;
    let patterns: Vec<Vec<usize>> = match &m.patterns {
        Some(ps) => ps.clone(),
        None => CATALOGUE.iter().chain(ODD_CATALOGUE.iter()).map(|x| x.to_vec()).collect(),
    };
    let mut stream = RngStream::new(seed, purpose::MOMENT_CHECK);
    let mut table = Table::new(&["pattern", "m", "even_parity", "terms", "max_z", "passed"]);
    let mut exprs = Vec::new();
    let mut assertions = Vec::new();
    let mut failures = Vec::new();
    for labels in &patterns {
        let mm = labels.len() / 2;
        let mut symbols = SymbolTable::new();
        let mut bindings = Bindings::new();
        let mut ids = Vec::new();
        for j in 1..mm {
            let id = symbols.parameter(&format!("A{j}"), p, p);
            bindings.insert(id, random_matrix(&mut stream, p));
            ids.push(id);
        }
        let pattern = MomentPattern::new(&symbols, p, ids, labels.clone())?;
        let sum = wick_expectation(&symbols, &pattern)?;
        let exact = sum.evaluate(&symbols, &bindings)?;
        let est = mc_moment_estimate(&symbols, &pattern, &bindings, m.samples, &mut stream)?;
        let z = est.max_z_score(&exact);
        let parity = pattern.has_even_parity();
        let passed = z <= m.z_limit && (parity || sum.is_zero());
        let name = labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ");
        if !passed {
            failures.push(name.clone());
        }
        table.push(vec![
            Cell::Text(name.clone()),
            mm.into(),
            parity.into(),
            sum.terms().len().into(),
            z.into(),
            passed.into(),
        ]);
        exprs.push(serde_json::json!({ "pattern": labels, "expectation": sum.display(&symbols) }));
    }
    assertions.push(Assertion::new(
        "wick_matches_monte_carlo",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} patterns within {} standard errors", patterns.len(), m.z_limit)
        } else {
            format!("failed patterns: {failures:?}")
        },
    ));

    // closed forms at the configured dimension
    let mut symbols = SymbolTable::new();
    let id = symbols.parameter("A", p, p);
    let a = random_matrix(&mut stream, p);
    let quartic = MomentPattern::single_sample(&symbols, p, vec![id])?;
    let got = wick_expectation(&symbols, &quartic)?.evaluate(&symbols, &Bindings::from([(id, a.clone())]))?;
    let closed = &a + a.transpose() + DMatrix::identity(p, p) * a.trace();
    let err = (&got - &closed).amax();
    assertions.push(Assertion::new(
        "quartic_closed_form",
        err <= 1e-12 * (1.0 + closed.amax()),
        format!("max abs deviation {err:.3e}"),
    ));
    let sym = DMatrix::from_fn(p, p, |i, j| ((i + 1) * (j + 1) % 5) as f64 - 2.0);
    let wick_trace = wick_expectation(&symbols, &quartic)?
        .evaluate(&symbols, &Bindings::from([(id, sym.clone())]))?
        .trace();
    let identity = trace_of_quartic(&sym)?;
    assertions.push(Assertion::new(
        "quartic_trace_identity",
        wick_trace == identity,
        format!("{wick_trace} vs (p+2)tr(A) = {identity}"),
    ));

    files.push(("moments".into(), table));
    json.push(("moments_expressions".into(), serde_json::Value::Array(exprs)));
    Ok(assertions)
}

/// Fast built-in checks: the moment catalogue at reduced sample size and the
/// toy regression oracles.
pub fn selfcheck(seed: u64) -> anyhow::Result<Vec<Assertion>> {
    let mut files = Vec::new();
    let mut json = Vec::new();
    let cfg = MomentsConfig {
        dim: 3,
        samples: 200_000,
        patterns: None,
        z_limit: 5.0,
    };
    let mut out = moments(&cfg, seed, &mut files, &mut json)?;

    let toy = Dataset::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]), DVector::from_vec(vec![0.0, 2.0]))?;
    let w0 = DVector::from_vec(vec![0.0]);
    let sched = crate::data::LearningRateSchedule::constant(0.5);
    let states = propagate_moments(&toy, &w0, &sched, 1)?;
    let v0 = variance_stochastic_gradient(&states[0], &toy, 1)?;
    out.push(Assertion::new("toy_variance_t0", v0 == 1.0, format!("Var g_0 = {v0}")));
    let s1 = states[1].second_moment.map(|m| m[(0, 0)]);
    out.push(Assertion::new(
        "toy_second_moment_t1",
        s1.coeffs() == [0.25, 0.25],
        format!("E[w_1^2] coefficients in c_b: {:?}", s1.coeffs()),
    ));

    let mut s = RngStream::new(seed, purpose::SYNTHETIC_DATA);
    let d = Dataset::synthetic_gaussian(&mut s, 4, 2, 0.5)?;
    let w = DVector::from_fn(2, |_, _| s.standard_normal());
    let a = random_matrix(&mut s, 2);
    let mut worst: f64 = 0.0;
    for b in 1..=4 {
        let lhs = batch_enumeration_second_moment(&d, &w, b, &a)?;
        let rhs = batch_second_moment_closed_form(&d, &w, b, &a)?;
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE));
    }
    out.push(Assertion::new("batch_enumeration_closed_form", worst <= 1e-10, format!("max relative error {worst:.3e}")));

    let sched = crate::data::LearningRateSchedule::inverse_iteration(0.3);
    let states = propagate_moments(&d, &w, &sched, 2)?;
    let term = LinearCombTerm::uniform(4, a);
    let tree = term_tree_polynomial(&d, &w, &sched, 2, &term)?;
    let engine = combination_norm_poly(&states[2], &d, &term)?;
    let mut worst: f64 = 0.0;
    for b in 1..=4 {
        let c = cb_factor(4, b)?.value;
        let (x, y) = (tree.evaluate(c), engine.evaluate(c));
        worst = worst.max((x - y).abs() / y.abs().max(f64::MIN_POSITIVE));
    }
    out.push(Assertion::new("term_tree_matches_engine", worst <= 1e-9, format!("max relative error {worst:.3e}")));
    Ok(out)
}
