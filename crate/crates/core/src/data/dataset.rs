use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::rng::{generate_gaussian_batch, RngStream};
use crate::error::{invalid, Error, Result};

/// Regression samples with cached second-moment quantities.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: DMatrix<f64>,
    targets: DVector<f64>,
    gram_per_sample: Vec<DMatrix<f64>>,
    gram_mean: DMatrix<f64>,
    target_moment: DVector<f64>,
}

impl Dataset {
    /// Build from an `n × p` feature matrix (one sample per row) and targets.
    pub fn new(features: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let (n, p) = features.shape();
        if n < 2 {
            return Err(Error::TooFewSamples { required: 2, found: n });
        }
        if p < 1 {
            return Err(invalid("features", "need at least one column"));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                context: "dataset targets",
                expected: n.to_string(),
                found: targets.len().to_string(),
            });
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("dataset", "all entries must be finite"));
        }

        let mut gram_per_sample = Vec::with_capacity(n);
        let mut gram_mean = DMatrix::zeros(p, p);
        let mut target_moment = DVector::zeros(p);
        for i in 0..n {
            let x = features.row(i).transpose();
            let ci = &x * x.transpose();
            gram_mean += &ci;
            target_moment.axpy(targets[i], &x, 1.0);
            gram_per_sample.push(ci);
        }
        gram_mean /= n as f64;
        target_moment /= n as f64;

        Ok(Self {
            features,
            targets,
            gram_per_sample,
            gram_mean,
            target_moment,
        })
    }

    /// i.i.d. standard normal features with `y = xᵀβ + noise·ε`, `β` also
    /// standard normal. Draws come from a single stream in a fixed order.
    pub fn synthetic_gaussian(stream: &mut RngStream, n: usize, p: usize, noise: f64) -> Result<Self> {
        if n < 2 || p < 1 {
            return Err(invalid("synthetic", format!("need n >= 2 and p >= 1, got n={n}, p={p}")));
        }
        let features = generate_gaussian_batch(stream, n, p);
        let beta = DVector::from_fn(p, |_, _| stream.standard_normal());
        let eps = DVector::from_fn(n, |_, _| stream.standard_normal());
        let targets = &features * beta + eps * noise;
        Self::new(features, targets)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// `C_i = x_i x_iᵀ`.
    pub fn gram_per_sample(&self) -> &[DMatrix<f64>] {
        &self.gram_per_sample
    }

    /// `C = (1/n) Σ C_i`.
    pub fn gram_mean(&self) -> &DMatrix<f64> {
        &self.gram_mean
    }

    /// `u = (1/n) Σ y_i x_i`.
    pub fn target_moment(&self) -> &DVector<f64> {
        &self.target_moment
    }

    /// `∇L_i(w) = x_i (x_iᵀ w − y_i)`.
    pub fn sample_gradient(&self, i: usize, w: &DVector<f64>) -> DVector<f64> {
        let x = self.sample(i);
        let r = x.dot(w) - self.targets[i];
        x * r
    }

    /// `∇L(w) = C w − u`.
    pub fn full_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.gram_mean * w - &self.target_moment
    }

    /// Mini-batch gradient `(1/b) Σ_{i∈B} ∇L_i(w)`.
    pub fn batch_gradient(&self, batch: &[usize], w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.p());
        for &i in batch {
            g += self.sample_gradient(i, w);
        }
        g / batch.len() as f64
    }

    /// Centers every column; scales non-constant columns to unit population
    /// standard deviation.
    pub fn standardized(&self) -> Result<Self> {
        Self::new(standardize_columns(&self.features), self.targets.clone())
    }

    /// Appends an all-ones column.
    pub fn with_intercept(&self) -> Result<Self> {
        let (n, p) = self.features.shape();
        let features = self.features.clone().insert_column(p, 1.0);
        debug_assert_eq!(features.shape(), (n, p + 1));
        Self::new(features, self.targets.clone())
    }
}

fn standardize_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n;
        col.add_scalar_mut(-mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            col /= sd;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub target_column: String,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub intercept: bool,
    /// Columns ignored entirely (e.g. row identifiers).
    #[serde(default)]
    pub exclude_columns: Vec<String>,
}

/// Loads a headered, comma-separated, numeric file. Every column other than
/// the target and the excluded ones becomes a feature, in file order. The
/// intercept column, if requested, is appended after standardization.
pub fn load_csv_dataset(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();

    let target_idx = headers
        .iter()
        .position(|h| *h == options.target_column)
        .ok_or_else(|| Error::UnknownColumn(options.target_column.clone()))?;
    for ex in &options.exclude_columns {
        if !headers.contains(ex) {
            return Err(Error::UnknownColumn(ex.clone()));
        }
    }
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&j| j != target_idx && !options.exclude_columns.contains(&headers[j]))
        .collect();
    if feature_idx.is_empty() {
        return Err(invalid("csv", "no feature columns left"));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let parse = |j: usize| -> Result<f64> {
            let cell = record.get(j).unwrap_or("");
            cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumeric {
                row: r + 1,
                column: headers[j].clone(),
                value: cell.to_owned(),
            })
        };
        for &j in &feature_idx {
            rows.push(parse(j)?);
        }
        targets.push(parse(target_idx)?);
    }
    let n = targets.len();
    if n < 2 {
        return Err(Error::TooFewSamples { required: 2, found: n });
    }

    let mut dataset = Dataset::new(
        DMatrix::from_row_slice(n, feature_idx.len(), &rows),
        DVector::from_vec(targets),
    )?;
    if options.standardize {
        dataset = dataset.standardized()?;
    }
    if options.intercept {
        dataset = dataset.with_intercept()?;
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rel_frob_err;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn opts(target: &str, standardize: bool, intercept: bool) -> CsvOptions {
        CsvOptions {
            target_column: target.into(),
            standardize,
            intercept,
            exclude_columns: vec![],
        }
    }

    #[test]
    fn two_row_toy_file() {
        let f = write_tmp("x,y\n1,0\n-1,2\n");
        let d = load_csv_dataset(f.path(), &opts("y", false, false)).unwrap();
        assert_eq!(d.gram_mean()[(0, 0)], 1.0);
        assert_eq!(d.target_moment()[0], -1.0);
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_sd() {
        let f = write_tmp("a,b,c,y\n1,10,5,0\n2,30,5,1\n4,20,5,2\n8,0,5,3\n");
        let d = load_csv_dataset(f.path(), &opts("y", true, false)).unwrap();
        let n = d.n() as f64;
        for (j, col) in d.features().column_iter().enumerate() {
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-12);
            if j < 2 {
                assert!((sd - 1.0).abs() < 1e-12);
            } else {
                // constant column: centered only
                assert_eq!(sd, 0.0);
            }
        }
    }

    #[test]
    fn intercept_and_exclusions() {
        let mut content = String::from("id,f1,f2,f3,f4,f5,f6,target\n");
        for i in 0..500 {
            let v = i as f64;
            content += &format!("{i},{},{},{},{},{},{},{}\n", v.sin(), v.cos(), v * 0.01, (v * 0.3).sin(), (v * 0.7).cos(), v % 7.0, v * 0.001);
        }
        let f = write_tmp(&content);
        let mut o = opts("target", true, true);
        o.exclude_columns = vec!["id".into()];
        let d = load_csv_dataset(f.path(), &o).unwrap();
        assert_eq!((d.n(), d.p()), (500, 7));
        assert!(d.features().column(6).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            load_csv_dataset("/nonexistent/file.csv", &opts("y", false, false)),
            Err(Error::Io { .. })
        ));
        let f = write_tmp("x,y\n1,0\n");
        assert!(matches!(
            load_csv_dataset(f.path(), &opts("y", false, false)),
            Err(Error::TooFewSamples { .. })
        ));
        let f = write_tmp("x,y\n1,0\nabc,2\n");
        assert!(matches!(
            load_csv_dataset(f.path(), &opts("y", false, false)),
            Err(Error::NonNumeric { row: 2, .. })
        ));
        let f = write_tmp("x,y\n1,0\n2,2\n");
        assert!(matches!(
            load_csv_dataset(f.path(), &opts("z", false, false)),
            Err(Error::UnknownColumn(_))
        ));
    }

    #[test]
    fn gram_mean_matches_rebuild() {
        let mut s = RngStream::new(3, 0);
        for _ in 0..10 {
            let d = Dataset::synthetic_gaussian(&mut s, 7, 4, 0.5).unwrap();
            let x = d.features();
            let rebuilt = x.transpose() * x / d.n() as f64;
            assert!(rel_frob_err(d.gram_mean(), &rebuilt) < 1e-14);
            let u = x.transpose() * d.targets() / d.n() as f64;
            assert!((d.target_moment() - &u).norm() <= 1e-14 * u.norm());
        }
    }
}
