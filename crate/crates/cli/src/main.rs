//! `qpi`: generate data, train quantile networks, backtest prediction
//! intervals and check coverage.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qpi_core::eval::families;
use qpi_core::oracle::sample;
use qpi_core::train::pairs_for_spec;
use qpi_core::{
    analytic_quantile, config_hash, coverage, emit_plot_data, emit_report, empirical_quantile, gen_linear, gen_sales_series,
    load_csv, make_windows, nesting_violations, parse_plot_data, rolling_backtest, save_csv, train_quantile, train_triple,
    Activation, CoverageReport, Dataset, DistributionSpec, NetworkShape, QuantileLevel, ReportFormat, ReportMeta, SalesSpec,
    Sample, SeriesFrame, TrainConfig, Tricks,
};
use serde::Serialize;

use crate::config::{parse_tricks, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(qpi_core::Error),
    /// verify-theorem finished but some estimate missed the tolerance.
    Tolerance(usize),
}

impl From<qpi_core::Error> for CliError {
    fn from(e: qpi_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use qpi_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Tolerance(_) => 1,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::InvalidShape(_) => 2,
                E::Divergence { .. } | E::NonFiniteGradient(_) => 4,
                _ => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Tolerance(n) => write!(f, "{n} estimate(s) outside tolerance"),
        }
    }
}

#[derive(Parser)]
#[command(name = "qpi", version, about = "Quantile neural networks and prediction-interval backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set as CSV.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train a median/lower/upper triple and write `triple.json`.
    Train(RunArgs),
    /// Walk-forward backtest; writes `plotdata.csv` and `coverage_<beta>.json`.
    Backtest(RunArgs),
    /// Recompute coverage reports from a stored `plotdata.csv`.
    Eval(EvalArgs),
    /// Train bias-only models on i.i.d. draws and compare with known quantiles.
    VerifyTheorem(VerifyArgs),
}

#[derive(Subcommand)]
enum GenKind {
    /// Daily sales-like series with weekly seasonality and a special-day flag.
    Sales(SalesArgs),
    /// Linear process `y = y0 + w.x + noise` with `x` uniform on `[-1, 1]^d`.
    Linear(LinearArgs),
}

#[derive(Args)]
struct SalesArgs {
    #[arg(long, default_value_t = 730)]
    days: usize,
    #[arg(long, default_value_t = 7)]
    period: usize,
    #[arg(long)]
    base: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    trend: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Keep the noise scale constant instead of growing with the level.
    #[arg(long)]
    homoscedastic: bool,
    #[arg(long)]
    special_rate: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl SalesArgs {
    fn spec(&self) -> SalesSpec {
        let d = SalesSpec::default();
        SalesSpec {
            days: self.days,
            period: self.period,
            base: self.base.unwrap_or(d.base),
            amplitude: self.amplitude.unwrap_or(d.amplitude),
            trend: self.trend.unwrap_or(d.trend),
            noise_scale: self.noise_scale.unwrap_or(d.noise_scale),
            heteroscedastic: !self.homoscedastic,
            special_rate: self.special_rate.unwrap_or(d.special_rate),
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct LinearArgs {
    #[arg(long)]
    n: usize,
    /// Comma-separated weights, one per feature.
    #[arg(long, value_delimiter = ',', required = true)]
    w: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    y0: f64,
    /// `kind`, `kind:scale` or `kind:location:scale`; kind is laplace or gaussian.
    #[arg(long, default_value = "laplace:1")]
    noise: DistributionSpec,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, String> {
    if s.trim() == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad layer width `{p}`: {e}")))
        .collect()
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with header `t,y[,name...]`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic source instead of a file (only `sales`).
    #[arg(long, value_parser = ["sales"])]
    generator: Option<String>,
    /// Length of the generated series.
    #[arg(long)]
    days: Option<usize>,
    /// Seed of the generated series.
    #[arg(long)]
    gen_seed: Option<u64>,
    /// Treat non-`y` CSV columns as the features (no lag windows).
    #[arg(long)]
    tabular: bool,
    /// Nominal interval widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Hidden layer widths, comma separated, or `none`.
    #[arg(long, value_parser = parse_hidden)]
    hidden: Option<::std::vec::Vec<usize>>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    test_days: Option<usize>,
    /// Refit the networks every this many forecast blocks.
    #[arg(long)]
    refit_every: Option<usize>,
    /// `none`, `all`, or a comma list of fixed_seed, penalty, median_feature.
    #[arg(long, value_parser = parse_tricks)]
    tricks: Option<Tricks>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    penalty_lambda: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
            c.generator = None;
        }
        if self.generator.is_some() {
            if self.data.is_some() {
                return Err(CliError::Usage("give exactly one of --data or --generator, not both".into()));
            }
            c.data = None;
            c.generator.get_or_insert_with(SalesSpec::default);
        }
        if let Some(g) = c.generator.as_mut() {
            if let Some(days) = self.days {
                g.days = days;
            }
            if let Some(seed) = self.gen_seed {
                g.seed = seed;
            }
        } else if self.days.is_some() || self.gen_seed.is_some() {
            return Err(CliError::Usage("--days and --gen-seed only apply with --generator".into()));
        }
        c.tabular |= self.tabular;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            beta => betas, hidden => hidden, activation => activation, window => window,
            horizon => horizon, test_days => test_days, refit_every => refit_every, tricks => tricks,
            seed => train.seed, lr0 => train.lr0, lr_decay => train.lr_decay, max_epochs => train.max_epochs,
            batch_size => train.batch_size, patience => train.patience, penalty_lambda => train.penalty_lambda,
            validation_fraction => train.validation_fraction,
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct EvalArgs {
    /// Stored predictions; defaults to `<out>/plotdata.csv`.
    #[arg(long)]
    plotdata: Option<PathBuf>,
    /// Run configuration used for report metadata; defaults to the
    /// `config.json` beside the plot data when present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "laplace:0:1")]
    distribution: DistributionSpec,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,0.5,0.75,0.95")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Largest accepted |learned - analytic|.
    #[arg(long, default_value_t = 0.08)]
    tolerance: f64,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Holdout share for early stopping; 0 monitors the loss on all draws.
    #[arg(long, default_value_t = 0.0)]
    validation_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { kind } => cmd_gen(kind),
        Command::Train(args) => args.resolve().and_then(|c| cmd_train(&c, &args.out)),
        Command::Backtest(args) => args.resolve().and_then(|c| cmd_backtest(&c, &args.out)),
        Command::Eval(args) => cmd_eval(&args),
        Command::VerifyTheorem(args) => cmd_verify_theorem(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(qpi_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Core(e.into()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(e.into()))
}

fn cmd_gen(kind: GenKind) -> Result<(), CliError> {
    match kind {
        GenKind::Sales(args) => {
            let frame = gen_sales_series(&args.spec())?;
            save_csv(&frame, &args.out)?;
            println!("wrote {} days to {}", frame.len(), args.out.display());
        }
        GenKind::Linear(args) => {
            if args.n == 0 {
                return Err(CliError::Usage("--n must be at least 1".into()));
            }
            let data = gen_linear(args.n, args.y0, &args.w, &args.noise, args.seed)?;
            save_csv(&data.to_frame()?, &args.out)?;
            println!("wrote {} samples to {}", data.len(), args.out.display());
        }
    }
    Ok(())
}

fn load_series(c: &RunConfig) -> Result<SeriesFrame, CliError> {
    match (&c.data, &c.generator) {
        (Some(path), None) => Ok(load_csv(path)?),
        (None, Some(spec)) => Ok(gen_sales_series(spec)?),
        _ => unreachable!("validated: exactly one data source"),
    }
}

fn meta(c: &RunConfig) -> Result<ReportMeta, CliError> {
    Ok(ReportMeta {
        seed: c.train.seed,
        config_hash: config_hash(c)?,
    })
}

fn cmd_train(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let [beta] = c.betas[..] else {
        return Err(CliError::Usage(format!("train needs exactly one --beta, got {}", c.betas.len())));
    };
    let series = load_series(c)?;
    let data = if c.tabular {
        Dataset::from_frame_tabular(&series)?
    } else {
        make_windows(&series, c.window, c.horizon)?
    };
    let shape = c.shape(data.feature_dim())?;
    let triple = train_triple(&data, &shape, qpi_core::IntervalSpec::new(beta)?, &c.train, c.tricks)?;
    create_dir(out)?;
    std::fs::write(out.join("triple.json"), triple.to_json()? + "\n").map_err(|e| CliError::Core(e.into()))?;
    write_json(&out.join("config.json"), c)?;

    let inside = data
        .samples()
        .iter()
        .filter(|s| qpi_core::predict_interval(&triple, &s.features).is_ok_and(|pi| pi.contains(s.target)))
        .count();
    println!(
        "trained on {} samples ({} features); in-sample coverage {:.4} at nominal {beta}",
        data.len(),
        data.feature_dim(),
        inside as f64 / data.len() as f64
    );
    println!("wrote {}", out.join("triple.json").display());
    Ok(())
}

fn print_reports(reports: &[CoverageReport]) {
    println!("{:>8} {:>10} {:>11} {:>10} {:>9} {:>6}", "nominal", "success", "mean_width", "rogue", "crossing", "n");
    for r in reports {
        println!(
            "{:>8} {:>10.4} {:>11.4} {:>10.4} {:>9} {:>6}",
            r.nominal_width, r.success_rate, r.mean_width, r.rogue_rate, r.crossing_count, r.n
        );
    }
}

fn report_path(out: &Path, beta: f64) -> PathBuf {
    out.join(format!("coverage_{beta}.json"))
}

fn write_reports(points: &[qpi_core::BacktestPoint], meta: &ReportMeta, out: &Path, format: FormatArg) -> Result<(), CliError> {
    let n_specs = points.first().map_or(0, |p| p.intervals.len());
    let reports: Vec<CoverageReport> = (0..n_specs)
        .map(|k| coverage(&pairs_for_spec(points, k)))
        .collect::<Result<_, _>>()?;
    match format {
        FormatArg::Json => {
            for r in &reports {
                emit_report(std::slice::from_ref(r), meta, report_path(out, r.nominal_width), ReportFormat::Json)?;
            }
        }
        FormatArg::Csv => emit_report(&reports, meta, out.join("coverage.csv"), ReportFormat::Csv)?,
    }
    print_reports(&reports);
    println!("nesting violations: {}", nesting_violations(&families(points))?);
    Ok(())
}

fn cmd_backtest(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    if c.tabular {
        return Err(CliError::Usage("backtest needs a time series; drop --tabular".into()));
    }
    let series = load_series(c)?;
    let specs = c.specs()?;
    // The input width is filled in per fold from the window layout.
    let shape = NetworkShape::new(1, c.hidden.clone(), c.activation)?;
    let points = rolling_backtest(&series, &c.backtest(), &specs, &shape, &c.train, c.tricks)?;
    create_dir(out)?;
    emit_plot_data(&points, out.join("plotdata.csv"))?;
    write_json(&out.join("config.json"), c)?;
    write_reports(&points, &meta(c)?, out, FormatArg::Json)
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let plot = args.plotdata.clone().unwrap_or_else(|| args.out.join("plotdata.csv"));
    let points = parse_plot_data(&plot)?;
    let sibling = plot.parent().map(|d| d.join("config.json")).filter(|p| p.exists());
    let meta = match args.config.clone().or(sibling) {
        Some(path) => meta(&RunConfig::load(&path)?)?,
        None => ReportMeta {
            seed: 0,
            config_hash: config_hash(&plot.display().to_string())?,
        },
    };
    create_dir(&args.out)?;
    write_reports(&points, &meta, &args.out, args.format)
}

fn cmd_verify_theorem(args: &VerifyArgs) -> Result<(), CliError> {
    if args.n == 0 || args.alphas.is_empty() {
        return Err(CliError::Usage("--n and --alphas must be non-empty".into()));
    }
    let ys = sample(&args.distribution, args.n, args.seed);
    let data = Dataset::new(
        ys.iter().map(|&y| Sample { features: vec![0.0], target: y }).collect(),
        vec!["dummy".into()],
    )?;
    let shape = NetworkShape::linear(1)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        seed: args.seed,
        lr0: args.lr0.unwrap_or(defaults.lr0),
        max_epochs: args.max_epochs.unwrap_or(defaults.max_epochs),
        validation_fraction: args.validation_fraction,
        ..defaults
    };
    config.validate()?;
    println!("distribution {} n={} tolerance {}", args.distribution, args.n, args.tolerance);
    println!("{:>6} {:>10} {:>10} {:>10} {:>9}  ok", "alpha", "learned", "analytic", "empirical", "|diff|");
    let mut misses = 0;
    for &a in &args.alphas {
        let alpha = QuantileLevel::new(a)?;
        let learned = train_quantile(&data, &shape, alpha, &config, None, None)?.output_bias();
        let analytic = analytic_quantile(&args.distribution, alpha);
        let empirical = empirical_quantile(&ys, alpha)?;
        let diff = (learned - analytic).abs();
        let ok = diff < args.tolerance;
        misses += usize::from(!ok);
        println!("{a:>6} {learned:>10.5} {analytic:>10.5} {empirical:>10.5} {diff:>9.5}  {}", if ok { "yes" } else { "NO" });
    }
    if misses > 0 {
        return Err(CliError::Tolerance(misses));
    }
    Ok(())
}
