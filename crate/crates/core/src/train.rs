//! Quantile training loops, the three-network interval scheme and the
//! walk-forward backtest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{first_target_row, make_windows, window_features, Dataset, NormStats, Sample, SeriesFrame};
use crate::error::{Error, Result};
use crate::loss::{bound_loss, bound_loss_grad, OrderingSide, QuantileLevel};
use crate::net::{AdamState, Gradient, NetworkParams, NetworkShape, Trace};

pub const TRIPLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub penalty_lambda: f64,
    /// Trailing share of samples held out for early stopping. When it rounds
    /// to zero samples (including 0.0) the training loss is monitored instead.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.97,
            max_epochs: 100,
            batch_size: 64,
            patience: 10,
            seed: 0,
            penalty_lambda: 10.0,
            validation_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("max_epochs, batch_size and patience must be at least 1");
        }
        if !(self.penalty_lambda >= 0.0 && self.penalty_lambda.is_finite()) {
            return bad("penalty_lambda must be nonnegative");
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A nominal interval width `beta` with bound levels `0.5 -/+ beta / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntervalSpecDoc", into = "IntervalSpecDoc")]
pub struct IntervalSpec {
    beta: f64,
}

#[derive(Serialize, Deserialize)]
struct IntervalSpecDoc {
    beta: f64,
}

impl TryFrom<IntervalSpecDoc> for IntervalSpec {
    type Error = Error;

    fn try_from(doc: IntervalSpecDoc) -> Result<Self> {
        Self::new(doc.beta)
    }
}

impl From<IntervalSpec> for IntervalSpecDoc {
    fn from(s: IntervalSpec) -> Self {
        Self { beta: s.beta }
    }
}

impl IntervalSpec {
    pub fn new(beta: f64) -> Result<Self> {
        if beta > 0.0 && beta < 1.0 {
            Ok(Self { beta })
        } else {
            Err(Error::InvalidArgument(format!("interval width beta must lie in (0, 1), got {beta}")))
        }
    }

    pub fn beta(self) -> f64 {
        self.beta
    }

    pub fn alpha_lower(self) -> QuantileLevel {
        QuantileLevel::new(0.5 - self.beta / 2.0).expect("beta in (0, 1)")
    }

    pub fn alpha_upper(self) -> QuantileLevel {
        QuantileLevel::new(0.5 + self.beta / 2.0).expect("beta in (0, 1)")
    }
}

/// Switches for the three interval tricks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Tricks {
    /// All three networks share `config.seed`.
    pub fixed_seed: bool,
    /// Bounds pay a hinge penalty for crossing the median's predictions.
    pub penalty: bool,
    /// The median's prediction is an extra input to both bounds.
    pub median_feature: bool,
}

impl Tricks {
    pub const NONE: Tricks = Tricks {
        fixed_seed: false,
        penalty: false,
        median_feature: false,
    };

    pub const ALL: Tricks = Tricks {
        fixed_seed: true,
        penalty: true,
        median_feature: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub spec: IntervalSpec,
}

impl PredictionInterval {
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    /// The median lies strictly outside `[lower, upper]`.
    pub fn is_rogue(&self) -> bool {
        self.median < self.lower || self.median > self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Median and bound networks plus everything needed to predict on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedTriple {
    pub version: u32,
    pub median: NetworkParams,
    pub lower: NetworkParams,
    pub upper: NetworkParams,
    pub spec: IntervalSpec,
    pub median_as_feature: bool,
    pub norm_stats: NormStats,
    pub config: TrainConfig,
    pub tricks: Tricks,
}

impl TrainedTriple {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.version != TRIPLE_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported triple format version {}", t.version)));
        }
        let d = t.median.shape().input_dim;
        let bound_dim = d + usize::from(t.median_as_feature);
        if t.lower.shape().input_dim != bound_dim || t.upper.shape().input_dim != bound_dim {
            return Err(Error::Schema("bound networks have the wrong input dimension".into()));
        }
        if t.norm_stats.feature_mean.len() != d || t.norm_stats.feature_std.len() != d {
            return Err(Error::Schema("normalization stats do not match the median input".into()));
        }
        Ok(t)
    }

    pub fn input_dim(&self) -> usize {
        self.median.shape().input_dim
    }
}

fn split_point(n: usize, validation_fraction: f64) -> usize {
    let n_val = (n as f64 * validation_fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        n
    } else {
        n - n_val
    }
}

impl TrainConfig {
    /// Number of leading samples used for gradient steps out of `n`; the
    /// rest are held out for early stopping.
    pub fn fit_len(&self, n: usize) -> usize {
        split_point(n, self.validation_fraction)
    }
}

struct Objective<'a> {
    alpha: QuantileLevel,
    reference: Option<(&'a [f64], OrderingSide)>,
    lambda: f64,
}

impl Objective<'_> {
    #[inline]
    fn parts(&self, i: usize) -> (f64, OrderingSide, f64) {
        match self.reference {
            Some((r, side)) => (r[i], side, self.lambda),
            // With a zero weight the hinge term vanishes for either side.
            None => (0.0, OrderingSide::UpperBound, 0.0),
        }
    }

    fn loss(&self, y: f64, yhat: f64, i: usize) -> f64 {
        let (r, side, lambda) = self.parts(i);
        bound_loss(y, yhat, self.alpha, r, side, lambda)
    }

    fn grad(&self, y: f64, yhat: f64, i: usize) -> f64 {
        let (r, side, lambda) = self.parts(i);
        bound_loss_grad(y, yhat, self.alpha, r, side, lambda)
    }

    fn mean_loss(&self, params: &NetworkParams, samples: &[Sample], offset: usize, trace: &mut Trace) -> f64 {
        let total: f64 = samples
            .iter()
            .enumerate()
            .map(|(j, s)| self.loss(s.target, params.forward_trace(&s.features, trace), offset + j))
            .sum();
        total / samples.len() as f64
    }
}

/// Mean pinball-plus-penalty loss of `params` over the whole dataset.
pub fn dataset_loss(
    params: &NetworkParams,
    dataset: &Dataset,
    alpha: QuantileLevel,
    reference: Option<(&[f64], OrderingSide)>,
    lambda: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let obj = Objective { alpha, reference, lambda };
    let mut trace = Trace::default();
    Ok(obj.mean_loss(params, dataset.samples(), 0, &mut trace))
}

/// Adam on mini-batches drawn with replacement from the leading
/// `1 - validation_fraction` of the samples; returns the parameters with the
/// lowest loss on the trailing validation part (the initial parameters count).
///
/// When `reference` is given every sample's loss includes the ordering
/// penalty against it with weight `config.penalty_lambda`.
pub fn train_quantile(
    dataset: &Dataset,
    shape: &NetworkShape,
    alpha: QuantileLevel,
    config: &TrainConfig,
    reference: Option<&[f64]>,
    side: Option<OrderingSide>,
) -> Result<NetworkParams> {
    config.validate()?;
    shape.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if shape.input_dim != dataset.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: shape.input_dim,
            actual: dataset.feature_dim(),
        });
    }
    let reference = match (reference, side) {
        (None, _) => None,
        (Some(r), Some(side)) if r.len() == dataset.len() => Some((r, side)),
        (Some(r), Some(_)) => {
            return Err(Error::DimensionMismatch {
                expected: dataset.len(),
                actual: r.len(),
            })
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument("a reference needs an ordering side".into()));
        }
    };
    let obj = Objective {
        alpha,
        reference,
        lambda: config.penalty_lambda,
    };

    let samples = dataset.samples();
    let cut = config.fit_len(samples.len());
    let train = &samples[..cut];
    let (val, val_offset) = if cut < samples.len() { (&samples[cut..], cut) } else { (train, 0) };

    let mut params = NetworkParams::init(shape, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut grad = Gradient::zeros_like(&params);
    let mut trace = Trace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut best = params.clone();
    let mut best_loss = obj.mean_loss(&params, val, val_offset, &mut trace);
    if !best_loss.is_finite() {
        return Err(Error::Divergence { epoch: 0, loss: best_loss });
    }
    let batches = train.len().div_ceil(config.batch_size);
    let inv_batch = 1.0 / config.batch_size as f64;
    let mut lr = config.lr0;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        for _ in 0..batches {
            grad.fill_zero();
            let mut batch_loss = 0.0;
            for _ in 0..config.batch_size {
                let i = rng.gen_range(0..train.len());
                let s = &train[i];
                let yhat = params.forward_trace(&s.features, &mut trace);
                batch_loss += obj.loss(s.target, yhat, i);
                let g = obj.grad(s.target, yhat, i);
                params.accumulate_gradient(&s.features, g * inv_batch, &trace, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: batch_loss * inv_batch,
                });
            }
            adam.step(&mut params, &grad, lr).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Divergence { epoch, loss: f64::NAN },
                other => other,
            })?;
        }
        lr *= config.lr_decay;

        let val_loss = obj.mean_loss(&params, val, val_offset, &mut trace);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(best)
}

fn predict_all(params: &NetworkParams, dataset: &Dataset) -> Vec<f64> {
    let mut trace = Trace::default();
    dataset
        .samples()
        .iter()
        .map(|s| params.forward_trace(&s.features, &mut trace))
        .collect()
}

fn with_extra_feature(dataset: &Dataset, extra: &[f64]) -> Result<Dataset> {
    let samples = dataset
        .samples()
        .iter()
        .zip(extra)
        .map(|(s, &m)| {
            let mut features = s.features.clone();
            features.push(m);
            Sample {
                features,
                target: s.target,
            }
        })
        .collect();
    let mut names = dataset.feature_names().to_vec();
    names.push("median".into());
    Dataset::new(samples, names)
}

/// Trains one median network and a lower/upper pair per spec, all sharing
/// the median. Bound pairs are trained in parallel; the result does not
/// depend on scheduling.
pub fn train_triples(
    dataset: &Dataset,
    shape: &NetworkShape,
    specs: &[IntervalSpec],
    config: &TrainConfig,
    tricks: Tricks,
) -> Result<Vec<TrainedTriple>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("at least one interval spec is required".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    config.validate()?;
    let (norm, norm_stats) = crate::data::normalize(dataset)?;

    let seed_for = |index: u64| {
        if tricks.fixed_seed {
            config.seed
        } else {
            config.seed.wrapping_add(index)
        }
    };
    let with_seed = |index: u64| TrainConfig {
        seed: seed_for(index),
        ..config.clone()
    };

    let median = train_quantile(&norm, shape, QuantileLevel::MEDIAN, &with_seed(0), None, None)?;
    let median_pred = predict_all(&median, &norm);

    let (bound_data, bound_shape) = if tricks.median_feature {
        (with_extra_feature(&norm, &median_pred)?, shape.with_input_dim(shape.input_dim + 1))
    } else {
        (norm, shape.clone())
    };
    let reference = tricks.penalty.then_some(median_pred.as_slice());
    let bound = |alpha, side, index| {
        let side = reference.map(|_| side);
        train_quantile(&bound_data, &bound_shape, alpha, &with_seed(index), reference, side)
    };

    specs
        .par_iter()
        .map(|&spec| {
            let (lower, upper) = rayon::join(
                || bound(spec.alpha_lower(), OrderingSide::LowerBound, 1),
                || bound(spec.alpha_upper(), OrderingSide::UpperBound, 2),
            );
            Ok(TrainedTriple {
                version: TRIPLE_FORMAT_VERSION,
                median: median.clone(),
                lower: lower?,
                upper: upper?,
                spec,
                median_as_feature: tricks.median_feature,
                norm_stats: norm_stats.clone(),
                config: config.clone(),
                tricks,
            })
        })
        .collect()
}

/// Median, lower and upper networks for a single interval spec.
///
/// The dataset is normalized internally; the triple predicts on raw features
/// and returns values on the raw target scale.
pub fn train_triple(
    dataset: &Dataset,
    shape: &NetworkShape,
    spec: IntervalSpec,
    config: &TrainConfig,
    tricks: Tricks,
) -> Result<TrainedTriple> {
    Ok(train_triples(dataset, shape, &[spec], config, tricks)?.remove(0))
}

pub fn predict_interval(triple: &TrainedTriple, x: &[f64]) -> Result<PredictionInterval> {
    if x.len() != triple.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: triple.input_dim(),
            actual: x.len(),
        });
    }
    let stats = &triple.norm_stats;
    let mut z = stats.apply_features(x);
    let m = triple.median.forward(&z)?;
    if triple.median_as_feature {
        z.push(m);
    }
    let lo = triple.lower.forward(&z)?;
    let hi = triple.upper.forward(&z)?;
    Ok(PredictionInterval {
        lower: stats.denormalize_prediction(lo),
        median: stats.denormalize_prediction(m),
        upper: stats.denormalize_prediction(hi),
        spec: triple.spec,
    })
}

/// Fraction of samples whose predicted median falls strictly outside the
/// predicted interval.
pub fn rogue_rate(triple: &TrainedTriple, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut rogue = 0usize;
    for s in dataset.samples() {
        rogue += usize::from(predict_interval(triple, &s.features)?.is_rogue());
    }
    Ok(rogue as f64 / dataset.len() as f64)
}

/// Walk-forward layout: the final `test_days` rows are predicted in blocks
/// of `horizon`; models are refitted every `refit_every` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub horizon: usize,
    pub test_days: usize,
    pub refit_every: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: 14,
            horizon: 1,
            test_days: 76,
            refit_every: 1,
        }
    }
}

/// Fewest training windows accepted before the first cut.
pub const MIN_TRAIN_WINDOWS: usize = 8;

/// One held-out day with an interval per requested spec.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestPoint {
    pub timestamp: i64,
    pub actual: f64,
    pub intervals: Vec<PredictionInterval>,
}

/// `(interval, actual)` pairs for the spec at `index`.
pub fn pairs_for_spec(points: &[BacktestPoint], index: usize) -> Vec<(PredictionInterval, f64)> {
    points.iter().map(|p| (p.intervals[index], p.actual)).collect()
}

/// Fits the triples used for the block starting at row `cut`. Only rows
/// before `cut` influence the result.
pub fn fit_fold(
    series: &SeriesFrame,
    bt: &BacktestConfig,
    cut: usize,
    specs: &[IntervalSpec],
    shape: &NetworkShape,
    config: &TrainConfig,
    tricks: Tricks,
) -> Result<Vec<TrainedTriple>> {
    let first = first_target_row(bt.window, bt.horizon);
    if cut > series.len() || cut < first + MIN_TRAIN_WINDOWS {
        return Err(Error::InsufficientHistory(format!(
            "cut at row {cut} leaves fewer than {MIN_TRAIN_WINDOWS} training windows"
        )));
    }
    let head = truncate(series, cut)?;
    let data = make_windows(&head, bt.window, bt.horizon)?;
    let shape = shape.with_input_dim(data.feature_dim());
    train_triples(&data, &shape, specs, config, tricks)
}

fn truncate(series: &SeriesFrame, rows: usize) -> Result<SeriesFrame> {
    SeriesFrame::new(
        series.timestamps()[..rows].to_vec(),
        series.values()[..rows].to_vec(),
        series
            .exogenous()
            .iter()
            .map(|(n, c)| (n.clone(), c[..rows].to_vec()))
            .collect(),
    )
}

/// Walk-forward evaluation over the last `bt.test_days` rows.
///
/// A direct `horizon`-step model predicts every day of a block from the
/// window ending `horizon` days earlier, so no prediction uses data at or
/// after the block start. Refits run in parallel.
pub fn rolling_backtest(
    series: &SeriesFrame,
    bt: &BacktestConfig,
    specs: &[IntervalSpec],
    shape: &NetworkShape,
    config: &TrainConfig,
    tricks: Tricks,
) -> Result<Vec<BacktestPoint>> {
    if bt.window == 0 || bt.horizon == 0 || bt.test_days == 0 || bt.refit_every == 0 {
        return Err(Error::InvalidArgument(
            "window, horizon, test_days and refit_every must be at least 1".into(),
        ));
    }
    if specs.is_empty() {
        return Err(Error::InvalidArgument("at least one interval spec is required".into()));
    }
    let first = first_target_row(bt.window, bt.horizon);
    let start = series.len().saturating_sub(bt.test_days);
    if bt.test_days > series.len() || start < first + MIN_TRAIN_WINDOWS {
        return Err(Error::InsufficientHistory(format!(
            "{} rows cannot hold {} test days after a window of {} and horizon {}",
            series.len(),
            bt.test_days,
            bt.window,
            bt.horizon
        )));
    }

    let blocks: Vec<usize> = (start..series.len()).step_by(bt.horizon).collect();
    let refits: Vec<usize> = blocks.iter().copied().step_by(bt.refit_every).collect();
    let fits: Vec<Vec<TrainedTriple>> = refits
        .par_iter()
        .map(|&cut| fit_fold(series, bt, cut, specs, shape, config, tricks))
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(bt.test_days);
    for (b, &cut) in blocks.iter().enumerate() {
        let triples = &fits[b / bt.refit_every];
        for row in cut..(cut + bt.horizon).min(series.len()) {
            let x = window_features(series, bt.window, bt.horizon, row);
            let intervals = triples
                .iter()
                .map(|t| predict_interval(t, &x))
                .collect::<Result<Vec<_>>>()?;
            points.push(BacktestPoint {
                timestamp: series.timestamps()[row],
                actual: series.values()[row],
                intervals,
            });
        }
    }
    Ok(points)
}
