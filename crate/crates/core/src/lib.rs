//! Neural quantile regression with the pinball loss, three-network
//! prediction intervals and walk-forward coverage checks.
//!
//! A model trained to minimize the expected pinball loss at level `alpha`
//! predicts the `alpha`-quantile of the target. Training a median network
//! and two bound networks at `0.5 -/+ beta / 2` yields an interval meant to
//! hold the outcome with probability `beta`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the row-major weight layout in the network code.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod oracle;
pub mod train;

pub use data::{gen_linear, gen_sales_series, load_csv, make_windows, normalize, save_csv, Dataset, NormStats, SalesSpec, Sample, SeriesFrame};
pub use error::{Error, Result};
pub use eval::{config_hash, coverage, emit_plot_data, emit_report, nesting_violations, parse_plot_data, CoverageReport, ReportFormat, ReportMeta};
pub use loss::{bound_loss, ordering_penalty, pinball, pinball_grad, OrderingSide, QuantileLevel};
pub use net::{Activation, AdamState, Gradient, NetworkParams, NetworkShape};
pub use oracle::{analytic_quantile, empirical_quantile, minimize_loss_grid, DistributionKind, DistributionSpec};
pub use train::{
    fit_fold, predict_interval, rogue_rate, rolling_backtest, train_quantile, train_triple, train_triples, BacktestConfig, BacktestPoint, IntervalSpec,
    PredictionInterval, TrainConfig, TrainedTriple, Tricks,
};
