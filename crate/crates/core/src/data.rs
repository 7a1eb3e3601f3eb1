//! Datasets, daily series, sliding windows and synthetic generators.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::DistributionSpec;

const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, feature_names: Vec<String>) -> Result<Self> {
        let dim = feature_names.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one feature".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: s.features.len(),
                });
            }
            if !s.target.is_finite() || s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i} has a non-finite entry")));
            }
        }
        Ok(Self {
            samples,
            feature_names,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.target).collect()
    }

    /// The first `n` samples, in order.
    pub fn head(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.len())].to_vec(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Treat every exogenous column as a feature and `y` as the target.
    pub fn from_frame_tabular(frame: &SeriesFrame) -> Result<Self> {
        let names: Vec<String> = frame.exogenous.iter().map(|(n, _)| n.clone()).collect();
        let samples = (0..frame.len())
            .map(|i| Sample {
                features: frame.exogenous.iter().map(|(_, c)| c[i]).collect(),
                target: frame.values[i],
            })
            .collect();
        Self::new(samples, names)
    }

    /// Inverse of [`Self::from_frame_tabular`] with `t` set to the row index.
    pub fn to_frame(&self) -> Result<SeriesFrame> {
        let exogenous = self
            .feature_names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.clone(), self.samples.iter().map(|s| s.features[j]).collect()))
            .collect();
        SeriesFrame::new((0..self.len() as i64).collect(), self.targets(), exogenous)
    }
}

/// A daily series with optional named exogenous columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    timestamps: Vec<i64>,
    values: Vec<f64>,
    exogenous: Vec<(String, Vec<f64>)>,
}

impl SeriesFrame {
    pub fn new(timestamps: Vec<i64>, values: Vec<f64>, exogenous: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = timestamps.len();
        if values.len() != n || exogenous.iter().any(|(_, c)| c.len() != n) {
            return Err(Error::InvalidArgument("series columns differ in length".into()));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonIncreasingTimestamps { line: i as u64 + 3 });
        }
        Ok(Self {
            timestamps,
            values,
            exogenous,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn exogenous(&self) -> &[(String, Vec<f64>)] {
        &self.exogenous
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.exogenous
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }
}

/// Features for the sample whose target sits at row `target`: the `window`
/// values ending `horizon` rows before it, then the exogenous columns at the
/// target row. Calendar information enters only through exogenous columns.
pub(crate) fn window_features(series: &SeriesFrame, window: usize, horizon: usize, target: usize) -> Vec<f64> {
    let end = target + 1 - horizon;
    let mut f = Vec::with_capacity(window + series.exogenous.len());
    f.extend_from_slice(&series.values[end - window..end]);
    f.extend(series.exogenous.iter().map(|(_, c)| c[target]));
    f
}

pub(crate) fn window_feature_names(series: &SeriesFrame, window: usize, horizon: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..window)
        .rev()
        .map(|j| format!("y_lag{}", horizon + j))
        .collect();
    names.extend(series.exogenous.iter().map(|(n, _)| n.clone()));
    names
}

/// Row index of the first target reachable with this window and horizon.
pub fn first_target_row(window: usize, horizon: usize) -> usize {
    window + horizon - 1
}

/// One sample per valid position; sample `i` targets row `i + window + horizon - 1`.
pub fn make_windows(series: &SeriesFrame, window: usize, horizon: usize) -> Result<Dataset> {
    if window == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("window and horizon must be at least 1".into()));
    }
    let needed = window + horizon;
    if series.len() < needed {
        return Err(Error::SeriesTooShort {
            needed,
            have: series.len(),
        });
    }
    let samples = (first_target_row(window, horizon)..series.len())
        .map(|t| Sample {
            features: window_features(series, window, horizon, t),
            target: series.values[t],
        })
        .collect();
    Dataset::new(samples, window_feature_names(series, window, horizon))
}

/// `y = y0 + w . x + z` with `x ~ U[-1, 1]^d` and `z ~ noise`.
pub fn gen_linear(n: usize, y0: f64, w: &[f64], noise: &DistributionSpec, seed: u64) -> Result<Dataset> {
    if n == 0 || w.is_empty() {
        return Err(Error::InvalidArgument("gen_linear needs n >= 1 and a non-empty w".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let x: Vec<f64> = w.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let y = y0 + w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + noise.draw(&mut rng);
            Sample { features: x, target: y }
        })
        .collect();
    Dataset::new(samples, (0..w.len()).map(|j| format!("x{j}")).collect())
}

/// Parameters of the synthetic daily sales generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalesSpec {
    pub days: usize,
    pub period: usize,
    pub base: f64,
    pub amplitude: f64,
    pub trend: f64,
    pub noise_scale: f64,
    pub heteroscedastic: bool,
    /// Probability that a day is flagged special (lifted by `amplitude`).
    pub special_rate: f64,
    pub seed: u64,
}

impl Default for SalesSpec {
    fn default() -> Self {
        Self {
            days: 730,
            period: 7,
            base: 100.0,
            amplitude: 25.0,
            trend: 0.005,
            noise_scale: 6.0,
            heteroscedastic: true,
            special_rate: 0.04,
            seed: 1,
        }
    }
}

/// Deterministic daily series
/// `max(0, base + trend t + amplitude sin(2 pi (t mod p) / p) + special + eps)`
/// with Laplace `eps`. When heteroscedastic the noise scale is multiplied by
/// `1 + level / base`, where `level` is the noiseless value.
///
/// Exogenous columns: `day_0..day_{p-1}` (one-hot day of period) and `special`.
pub fn gen_sales_series(spec: &SalesSpec) -> Result<SeriesFrame> {
    if spec.period == 0 || spec.days < 2 * spec.period {
        return Err(Error::InvalidArgument(format!(
            "sales series needs period >= 1 and days >= 2 * period, got days={} period={}",
            spec.days, spec.period
        )));
    }
    if !(spec.noise_scale > 0.0) || !(0.0..=1.0).contains(&spec.special_rate) {
        return Err(Error::InvalidArgument(
            "noise_scale must be positive and special_rate in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.period;
    let mut values = Vec::with_capacity(spec.days);
    let mut onehot = vec![vec![0.0; spec.days]; p];
    let mut special = vec![0.0; spec.days];
    let base_level = spec.base.abs().max(f64::MIN_POSITIVE);

    for t in 0..spec.days {
        let phase = t % p;
        onehot[phase][t] = 1.0;
        let is_special = rng.gen_bool(spec.special_rate);
        special[t] = if is_special { 1.0 } else { 0.0 };
        let level = spec.base
            + spec.trend * t as f64
            + spec.amplitude * (TAU * phase as f64 / p as f64).sin()
            + special[t] * spec.amplitude;
        let mut scale = spec.noise_scale;
        if spec.heteroscedastic {
            scale *= 1.0 + level.max(0.0) / base_level;
        }
        let eps = DistributionSpec::laplace(0.0, scale)?.draw(&mut rng);
        values.push((level + eps).max(0.0));
    }

    let mut exogenous: Vec<(String, Vec<f64>)> = onehot
        .into_iter()
        .enumerate()
        .map(|(k, c)| (format!("day_{k}"), c))
        .collect();
    exogenous.push(("special".into(), special));
    SeriesFrame::new((0..spec.days as i64).collect(), values, exogenous)
}

/// Reads a `t,y[,name...]` CSV.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesFrame> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(Error::EmptyInput("CSV file has no header")),
        Some(r) => r?,
    };
    if header.len() < 2 || &header[0] != "t" || &header[1] != "y" {
        return Err(Error::MalformedRow {
            line: 1,
            reason: "header must start with `t,y`".into(),
        });
    }
    let names: Vec<String> = header.iter().map(str::to_owned).collect();
    let width = names.len();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut exo: Vec<Vec<f64>> = vec![Vec::new(); width - 2];
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let bad = |col: usize| Error::NonNumericCell {
            line,
            column: names[col].clone(),
            value: rec[col].to_owned(),
        };
        let t: i64 = rec[0].parse().map_err(|_| bad(0))?;
        if timestamps.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::NonIncreasingTimestamps { line });
        }
        timestamps.push(t);
        let parse = |col: usize| match rec[col].parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(bad(col)),
        };
        values.push(parse(1)?);
        for (j, c) in exo.iter_mut().enumerate() {
            c.push(parse(j + 2)?);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::EmptyInput("CSV file has no data rows"));
    }
    let exogenous = names[2..].iter().cloned().zip(exo).collect();
    SeriesFrame::new(timestamps, values, exogenous)
}

pub fn save_csv(frame: &SeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["t".to_owned(), "y".to_owned()];
    header.extend(frame.exogenous.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..frame.len() {
        row.clear();
        row.push(frame.timestamps[i].to_string());
        row.push(frame.values[i].to_string());
        row.extend(frame.exogenous.iter().map(|(_, c)| c[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column affine maps to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR).sqrt())
}

impl NormStats {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput("cannot normalize an empty dataset"));
        }
        let (feature_mean, feature_std) = (0..dataset.feature_dim())
            .map(|j| mean_std(dataset.samples.iter().map(move |s| s.features[j])))
            .unzip();
        let (target_mean, target_std) = mean_std(dataset.samples.iter().map(|s| s.target));
        Ok(Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        })
    }

    pub fn apply_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn denormalize_prediction(&self, value: f64) -> f64 {
        self.target_mean + self.target_std * value
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.feature_dim() != self.feature_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_mean.len(),
                actual: dataset.feature_dim(),
            });
        }
        let samples = dataset
            .samples
            .iter()
            .map(|s| Sample {
                features: self.apply_features(&s.features),
                target: self.apply_target(s.target),
            })
            .collect();
        Ok(Dataset {
            samples,
            feature_names: dataset.feature_names.clone(),
        })
    }
}

pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(dataset)?;
    Ok((stats.apply(dataset)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> SeriesFrame {
        SeriesFrame::new((0..n as i64).collect(), (1..=n).map(|v| v as f64).collect(), vec![]).unwrap()
    }

    #[test]
    fn window_counts_and_contents() {
        let d = make_windows(&ramp(15), 14, 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples()[0].target, 15.0);

        let d = make_windows(&ramp(20), 3, 1).unwrap();
        assert_eq!(&d.samples()[0].features[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(d.samples()[0].target, 4.0);
        assert_eq!(d.len(), 20 - 3 - 1 + 1);
        assert_eq!(d.feature_names(), ["y_lag3", "y_lag2", "y_lag1"]);

        let d = make_windows(&ramp(21), 14, 7).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples()[0].target, 21.0);
        assert_eq!(d.samples()[0].features[13], 14.0);

        assert!(matches!(
            make_windows(&ramp(10), 8, 3),
            Err(Error::SeriesTooShort { needed: 11, have: 10 })
        ));
    }

    #[test]
    fn window_count_formula() {
        for (len, w, h) in [(30, 5, 1), (30, 5, 7), (100, 14, 14), (12, 1, 1)] {
            let d = make_windows(&ramp(len), w, h).unwrap();
            assert_eq!(d.len(), len - w - h + 1);
        }
    }

    #[test]
    fn linear_generator() {
        let noise = DistributionSpec::laplace(0.0, 1e-12).unwrap();
        let d = gen_linear(50, 2.0, &[3.0], &noise, 4).unwrap();
        for s in d.samples() {
            assert!((s.target - (2.0 + 3.0 * s.features[0])).abs() < 1e-9);
            assert!(s.features[0].abs() <= 1.0);
        }
        assert_eq!(d, gen_linear(50, 2.0, &[3.0], &noise, 4).unwrap());
    }

    #[test]
    fn linear_generator_ols_slope() {
        let noise = DistributionSpec::laplace(0.0, 1.0).unwrap();
        let d = gen_linear(10_000, 2.0, &[3.0], &noise, 17).unwrap();
        let n = d.len() as f64;
        let mx = d.samples().iter().map(|s| s.features[0]).sum::<f64>() / n;
        let my = d.samples().iter().map(|s| s.target).sum::<f64>() / n;
        let sxy: f64 = d.samples().iter().map(|s| (s.features[0] - mx) * (s.target - my)).sum();
        let sxx: f64 = d.samples().iter().map(|s| (s.features[0] - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope - 3.0).abs() < 0.1, "{slope}");
        assert!((my - slope * mx - 2.0).abs() < 0.1);
    }

    #[test]
    fn degenerate_sales_series_is_constant() {
        let spec = SalesSpec {
            amplitude: 0.0,
            trend: 0.0,
            noise_scale: 1e-12,
            days: 28,
            ..SalesSpec::default()
        };
        let f = gen_sales_series(&spec).unwrap();
        assert!(f.values().iter().all(|v| (v - spec.base).abs() < 1e-9));
    }

    #[test]
    fn sales_one_hot_and_determinism() {
        let spec = SalesSpec::default();
        let f = gen_sales_series(&spec).unwrap();
        assert_eq!(f.len(), 730);
        let day_cols: Vec<&[f64]> = (0..7).map(|k| f.column(&format!("day_{k}")).unwrap()).collect();
        for i in 0..f.len() {
            assert_eq!(day_cols.iter().map(|c| c[i]).sum::<f64>(), 1.0);
        }
        assert!(f.column("special").is_some());
        assert_eq!(f, gen_sales_series(&spec).unwrap());
        assert!(gen_sales_series(&SalesSpec { days: 13, ..spec }).is_err());
    }

    #[test]
    fn heteroscedastic_noise_grows_with_level() {
        let spec = SalesSpec {
            days: 2000,
            trend: 0.0,
            special_rate: 0.0,
            amplitude: 40.0,
            ..SalesSpec::default()
        };
        let f = gen_sales_series(&spec).unwrap();
        let var_on = |phase: usize| {
            let v: Vec<f64> = f.values().iter().skip(phase).step_by(7).copied().collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        // Phase 2 sits near the seasonal peak, phase 5 near the trough.
        assert!(var_on(2) > var_on(5), "{} vs {}", var_on(2), var_on(5));
    }

    #[test]
    fn csv_round_trip() {
        let f = gen_sales_series(&SalesSpec {
            days: 60,
            ..SalesSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        save_csv(&f, &p).unwrap();
        let g = load_csv(&p).unwrap();
        assert_eq!(f.timestamps(), g.timestamps());
        for (a, b) in f.values().iter().zip(g.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(f, g);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, body).unwrap();
            p
        };
        assert!(matches!(load_csv(dir.path().join("nope.csv")), Err(Error::MissingFile(_))));
        assert!(matches!(load_csv(write("e.csv", "")), Err(Error::EmptyInput(_))));
        assert!(matches!(load_csv(write("h.csv", "t,y\n")), Err(Error::EmptyInput(_))));
        assert!(matches!(
            load_csv(write("b.csv", "a,b\n1,2\n")),
            Err(Error::MalformedRow { line: 1, .. })
        ));
        match load_csv(write("n.csv", "t,y,x\n0,1,2\n1,abc,3\n")) {
            Err(e @ Error::NonNumericCell { line: 3, .. }) => {
                assert!(e.to_string().contains("malformed row at line 3"), "{e}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_csv(write("f.csv", "t,y\n0,1\n1,2,3\n")),
            Err(Error::MalformedRow { line: 3, .. })
        ));
        assert!(matches!(
            load_csv(write("o.csv", "t,y\n0,1\n2,2\n2,3\n")),
            Err(Error::NonIncreasingTimestamps { line: 4 })
        ));
    }

    #[test]
    fn normalization() {
        let noise = DistributionSpec::gaussian(0.0, 2.0).unwrap();
        let raw = gen_linear(500, 5.0, &[1.0, -2.0], &noise, 9).unwrap();
        let samples = raw
            .samples()
            .iter()
            .map(|s| Sample {
                features: vec![s.features[0], s.features[1], 4.0],
                target: s.target,
            })
            .collect();
        let d = Dataset::new(samples, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let (nd, st) = normalize(&d).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = nd.samples().iter().map(|s| s.features[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6);
        }
        assert!(nd.samples().iter().all(|s| s.features[2] == 0.0));
        for (a, b) in d.samples().iter().zip(nd.samples()) {
            assert!((st.denormalize_prediction(b.target) - a.target).abs() < 1e-9);
        }
        let empty = Dataset::new(vec![], vec!["a".into()]).unwrap();
        assert!(normalize(&empty).is_err());
    }

    #[test]
    fn tabular_frame_round_trip() {
        let noise = DistributionSpec::laplace(0.0, 1.0).unwrap();
        let d = gen_linear(20, 2.0, &[3.0, 1.0], &noise, 1).unwrap();
        let f = d.to_frame().unwrap();
        assert_eq!(Dataset::from_frame_tabular(&f).unwrap(), d);
    }
}
